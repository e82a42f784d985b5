//! The external memory: a path -> text map mirrored synchronously to disk.
//! The on-disk mirror under the run directory is the deliverable codebase.
//!
//! Paths are always relative and traversal-free; contents are UTF-8 text.
//! Files are capped at write time by the half-margin rule so the LLM can
//! always re-read and rewrite any single file inside its context window.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::messages::Message;
use crate::tokens::TokenCounter;

/// Sentinel file name that clears the whole store when passed to delete.
pub const DELETE_ALL_SENTINEL: &str = "-1";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PathViolation {
    #[error("path is empty")]
    Empty,
    #[error("absolute paths are not allowed: {0}")]
    Absolute(String),
    #[error("path may not contain '.' or '..' segments: {0}")]
    Traversal(String),
    #[error("path contains a NUL byte")]
    NulByte,
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Path(#[from] PathViolation),
    #[error("file {path} is {tokens} tokens, larger than the {limit}-token write limit")]
    FileTooLarge {
        path: String,
        tokens: usize,
        limit: usize,
    },
    #[error("content of {0} is not plain text")]
    BinaryContent(String),
    #[error("disk mirror: {0}")]
    Io(#[from] io::Error),
}

/// Validates and normalizes a store path. Accepts only relative paths made
/// of plain segments separated by `/`.
pub fn normalize_path(raw: &str) -> Result<String, PathViolation> {
    if raw.is_empty() {
        return Err(PathViolation::Empty);
    }
    if raw.contains('\0') {
        return Err(PathViolation::NulByte);
    }
    if raw.starts_with('/') || raw.starts_with('\\') || raw.starts_with('~') {
        return Err(PathViolation::Absolute(raw.to_string()));
    }
    // windows-style drive or UNC prefixes are treated as absolute too
    if raw.len() >= 2 && raw.as_bytes()[1] == b':' {
        return Err(PathViolation::Absolute(raw.to_string()));
    }
    let normalized = raw.replace('\\', "/");
    let mut segments = Vec::new();
    for segment in normalized.split('/') {
        match segment {
            "" | "." => return Err(PathViolation::Traversal(raw.to_string())),
            ".." => return Err(PathViolation::Traversal(raw.to_string())),
            s => segments.push(s),
        }
    }
    Ok(segments.join("/"))
}

fn depth_and_segments(path: &str) -> (usize, Vec<&str>) {
    let segments: Vec<&str> = path.split('/').collect();
    (segments.len() - 1, segments)
}

/// Optional write-time cap for one file, from the half-margin rule.
pub struct FileSizeLimit<'a> {
    pub max_tokens: usize,
    pub counter: &'a dyn TokenCounter,
}

/// The file store `D`.
#[derive(Debug)]
pub struct FileStore {
    root: PathBuf,
    entries: BTreeMap<String, String>,
}

impl FileStore {
    /// Creates an empty store whose disk mirror lives at `root`. The
    /// directory is created (not wiped) if missing.
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(FileStore {
            root,
            entries: BTreeMap::new(),
        })
    }

    /// Loads an existing mirror from disk, e.g. to evaluate a finished run.
    /// Non-UTF-8 files are skipped.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        let mut entries = BTreeMap::new();
        let mut stack = vec![root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let path = entry.path();
                if path.is_dir() {
                    stack.push(path);
                } else if let Ok(content) = fs::read_to_string(&path) {
                    let rel = path
                        .strip_prefix(&root)
                        .expect("walked path is under root")
                        .to_string_lossy()
                        .replace('\\', "/");
                    entries.insert(rel, content);
                }
            }
        }
        Ok(FileStore { root, entries })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn entries(&self) -> &BTreeMap<String, String> {
        &self.entries
    }

    pub fn get(&self, path: &str) -> Option<&String> {
        self.entries.get(path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All paths in breadth-first order over the directory tree: shallower
    /// paths first, segment-wise lexicographic order within a depth.
    pub fn list_files(&self) -> Vec<String> {
        let mut paths: Vec<&String> = self.entries.keys().collect();
        paths.sort_by(|a, b| {
            let (da, sa) = depth_and_segments(a);
            let (db, sb) = depth_and_segments(b);
            da.cmp(&db).then_with(|| sa.cmp(&sb))
        });
        paths.into_iter().cloned().collect()
    }

    /// Prints the requested files into a function response. Missing paths
    /// are reported inline without aborting the rest.
    pub fn view_files(&self, paths: &[String], counter: &dyn TokenCounter) -> Message {
        let mut blocks = Vec::new();
        for raw in paths {
            let lookup = normalize_path(raw).ok();
            let content = lookup.as_ref().and_then(|p| self.entries.get(p));
            match content {
                Some(content) => blocks.push(format!("{raw}\n```\n{content}\n```")),
                None => blocks.push(format!("File not found: {raw}")),
            }
        }
        Message::function_response(blocks.join("\n\n"), counter)
    }

    /// Creates or fully overwrites the given files (whole-file semantics).
    /// The batch is validated first and applied atomically: one bad path or
    /// oversized file rejects the whole batch, leaving the store unchanged.
    pub fn write_files(
        &mut self,
        files: &[(String, String)],
        limit: Option<&FileSizeLimit<'_>>,
    ) -> Result<(), StoreError> {
        let mut validated = Vec::with_capacity(files.len());
        for (raw, content) in files {
            let path = normalize_path(raw)?;
            if content.contains('\0') {
                return Err(StoreError::BinaryContent(path));
            }
            if let Some(limit) = limit {
                let tokens = limit.counter.count(content);
                if tokens > limit.max_tokens {
                    return Err(StoreError::FileTooLarge {
                        path,
                        tokens,
                        limit: limit.max_tokens,
                    });
                }
            }
            validated.push((path, content.clone()));
        }
        for (path, content) in validated {
            self.sync_write(&path, &content)?;
            self.entries.insert(path, content);
        }
        Ok(())
    }

    /// Removes the named files; `-1` anywhere in the list clears the whole
    /// store. Returns (deleted, not-found) path lists.
    pub fn delete_files(&mut self, paths: &[String]) -> Result<(Vec<String>, Vec<String>), StoreError> {
        if paths.iter().any(|p| p == DELETE_ALL_SENTINEL) {
            let all: Vec<String> = self.entries.keys().cloned().collect();
            for path in &all {
                self.sync_delete(path)?;
            }
            self.entries.clear();
            return Ok((all, Vec::new()));
        }
        let mut deleted = Vec::new();
        let mut missing = Vec::new();
        for raw in paths {
            match normalize_path(raw).ok().filter(|p| self.entries.contains_key(p)) {
                Some(path) => {
                    self.sync_delete(&path)?;
                    self.entries.remove(&path);
                    deleted.push(raw.clone());
                }
                None => missing.push(raw.clone()),
            }
        }
        Ok((deleted, missing))
    }

    /// Canonical content hash: sha256 over (path, content) pairs in key
    /// order, with length framing so concatenation cannot collide.
    pub fn content_hash(&self) -> String {
        let mut hasher = Sha256::new();
        for (path, content) in &self.entries {
            hasher.update((path.len() as u64).to_be_bytes());
            hasher.update(path.as_bytes());
            hasher.update((content.len() as u64).to_be_bytes());
            hasher.update(content.as_bytes());
        }
        format!("{:x}", hasher.finalize())
    }

    /// Copies the current entries into `target` (used to stage throwaway
    /// sandboxes for process execution).
    pub fn mirror_to(&self, target: &Path) -> Result<(), StoreError> {
        for (path, content) in &self.entries {
            let dest = target.join(path);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::write(dest, content)?;
        }
        Ok(())
    }

    fn sync_write(&self, path: &str, content: &str) -> Result<(), StoreError> {
        let dest = self.root.join(path);
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(dest, content)?;
        Ok(())
    }

    fn sync_delete(&self, path: &str) -> Result<(), StoreError> {
        let dest = self.root.join(path);
        if dest.exists() {
            fs::remove_file(&dest)?;
        }
        // prune now-empty parent directories up to the root
        let mut dir = dest.parent().map(Path::to_path_buf);
        while let Some(d) = dir {
            if d == self.root || fs::remove_dir(&d).is_err() {
                break;
            }
            dir = d.parent().map(Path::to_path_buf);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::HeuristicTokenizer;
    use proptest::prelude::*;

    const T: HeuristicTokenizer = HeuristicTokenizer;

    fn scratch_store() -> (tempfile::TempDir, FileStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = FileStore::create(dir.path().join("ws")).unwrap();
        (dir, store)
    }

    fn write_one(store: &mut FileStore, path: &str, content: &str) {
        store
            .write_files(&[(path.to_string(), content.to_string())], None)
            .unwrap();
    }

    #[test]
    fn empty_store_lists_nothing() {
        let (_g, store) = scratch_store();
        assert!(store.list_files().is_empty());
    }

    #[test]
    fn list_is_breadth_first_then_lexicographic() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "tests/test_app.py", "t");
        write_one(&mut store, "app.py", "a");
        write_one(&mut store, "services/url.py", "u");
        assert_eq!(
            store.list_files(),
            vec!["app.py", "services/url.py", "tests/test_app.py"]
        );
    }

    #[test]
    fn list_orders_by_depth_before_name() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "a/b/c.py", "1");
        write_one(&mut store, "a/d.py", "2");
        write_one(&mut store, "e.py", "3");
        assert_eq!(store.list_files(), vec!["e.py", "a/d.py", "a/b/c.py"]);
    }

    #[test]
    fn view_existing_file_returns_exact_bytes() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "app.py", "print('hi')\n");
        let msg = store.view_files(&["app.py".into()], &T);
        assert_eq!(msg.content, "app.py\n```\nprint('hi')\n\n```");
    }

    #[test]
    fn view_mixed_reports_missing_inline() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "app.py", "x = 1");
        let msg = store.view_files(&["app.py".into(), "ghost.py".into()], &T);
        assert!(msg.content.contains("app.py\n```\nx = 1\n```"));
        assert!(msg.content.contains("File not found: ghost.py"));
    }

    #[test]
    fn view_empty_request_is_empty_message() {
        let (_g, store) = scratch_store();
        let msg = store.view_files(&[], &T);
        assert_eq!(msg.content, "");
    }

    #[test]
    fn write_then_overwrite_replaces_content() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "app.py", "old");
        write_one(&mut store, "app.py", "new");
        assert_eq!(store.get("app.py").unwrap(), "new");
        let on_disk = std::fs::read_to_string(store.root().join("app.py")).unwrap();
        assert_eq!(on_disk, "new");
    }

    #[test]
    fn traversal_write_rejected_and_store_unchanged() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "safe.py", "ok");
        let err = store
            .write_files(&[("../escape.py".into(), "bad".into())], None)
            .unwrap_err();
        assert!(matches!(err, StoreError::Path(PathViolation::Traversal(_))));
        assert_eq!(store.len(), 1);
        assert!(!store.root().parent().unwrap().join("escape.py").exists());
    }

    #[test]
    fn batch_with_one_bad_path_is_fully_rejected() {
        let (_g, mut store) = scratch_store();
        let err = store
            .write_files(
                &[
                    ("good.py".into(), "ok".into()),
                    ("/etc/passwd".into(), "bad".into()),
                ],
                None,
            )
            .unwrap_err();
        assert!(matches!(err, StoreError::Path(PathViolation::Absolute(_))));
        assert!(store.is_empty());
    }

    #[test]
    fn oversized_file_rejected_by_half_margin_limit() {
        let (_g, mut store) = scratch_store();
        let limit = FileSizeLimit {
            max_tokens: 10,
            counter: &T,
        };
        let err = store
            .write_files(&[("big.py".into(), "x".repeat(100))], Some(&limit))
            .unwrap_err();
        assert!(matches!(err, StoreError::FileTooLarge { .. }));
        assert!(store.is_empty());
    }

    #[test]
    fn delete_sentinel_clears_store() {
        let (_g, mut store) = scratch_store();
        for i in 0..5 {
            write_one(&mut store, &format!("f{i}.py"), "x");
        }
        let (deleted, missing) = store.delete_files(&[DELETE_ALL_SENTINEL.into()]).unwrap();
        assert_eq!(deleted.len(), 5);
        assert!(missing.is_empty());
        assert!(store.is_empty());
        assert!(std::fs::read_dir(store.root()).unwrap().next().is_none());
    }

    #[test]
    fn delete_missing_is_soft_reported() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "a.py", "x");
        let (deleted, missing) = store.delete_files(&["b.py".into()]).unwrap();
        assert!(deleted.is_empty());
        assert_eq!(missing, vec!["b.py".to_string()]);
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn delete_empty_list_is_noop() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "a.py", "x");
        let (deleted, missing) = store.delete_files(&[]).unwrap();
        assert!(deleted.is_empty() && missing.is_empty());
        assert_eq!(store.len(), 1);
    }

    #[test]
    fn open_round_trips_disk_mirror() {
        let (_g, mut store) = scratch_store();
        write_one(&mut store, "pkg/mod.py", "m = 1\n");
        write_one(&mut store, "app.py", "import pkg.mod\n");
        let reopened = FileStore::open(store.root()).unwrap();
        assert_eq!(reopened.entries(), store.entries());
        assert_eq!(reopened.content_hash(), store.content_hash());
    }

    // Independent oracle: an explicit queue-based BFS over a directory tree
    // built from the paths, visiting children of each directory in
    // lexicographic order, files before descending further.
    fn bfs_oracle(paths: &[String]) -> Vec<String> {
        use std::collections::VecDeque;
        #[derive(Default)]
        struct Node {
            files: Vec<String>,
            dirs: BTreeMap<String, Node>,
        }
        let mut root = Node::default();
        for p in paths {
            let mut node = &mut root;
            let segments: Vec<&str> = p.split('/').collect();
            for seg in &segments[..segments.len() - 1] {
                node = node.dirs.entry(seg.to_string()).or_default();
            }
            node.files.push(p.clone());
        }
        let mut out = Vec::new();
        let mut queue = VecDeque::new();
        queue.push_back(&root);
        while let Some(node) = queue.pop_front() {
            let mut files = node.files.clone();
            files.sort();
            out.extend(files);
            for child in node.dirs.values() {
                queue.push_back(child);
            }
        }
        out
    }

    fn arb_rel_path() -> impl Strategy<Value = String> {
        proptest::collection::vec("[a-z]{1,6}", 1..4).prop_map(|segs| segs.join("/"))
    }

    proptest! {
        #[test]
        fn write_view_round_trip(path in arb_rel_path(), content in "[ -~\n]{0,300}") {
            let (_g, mut store) = scratch_store();
            store.write_files(&[(path.clone(), content.clone())], None).unwrap();
            prop_assert_eq!(store.get(&path).unwrap(), &content);
            let msg = store.view_files(&[path.clone()], &T);
            prop_assert!(msg.content.contains(&content));
        }

        #[test]
        fn listing_matches_bfs_oracle(paths in proptest::collection::btree_set(arb_rel_path(), 0..12)) {
            let (_g, mut store) = scratch_store();
            for p in &paths {
                store.write_files(&[(p.clone(), "x".into())], None).unwrap();
            }
            let listed = store.list_files();
            let expected = bfs_oracle(&store.entries().keys().cloned().collect::<Vec<_>>());
            prop_assert_eq!(&listed, &expected);
            // stable across calls and a permutation of the keys
            prop_assert_eq!(&listed, &store.list_files());
            let mut sorted = listed.clone();
            sorted.sort();
            let keys: Vec<String> = store.entries().keys().cloned().collect();
            prop_assert_eq!(sorted, keys);
        }

        #[test]
        fn traversal_paths_never_escape_root(evil in r"(\.\./|/|~/|\./)[a-z]{1,8}(/\.\.)?") {
            let (_g, mut store) = scratch_store();
            let before = store.content_hash();
            let result = store.write_files(&[(evil, "boom".into())], None);
            prop_assert!(result.is_err());
            prop_assert_eq!(store.content_hash(), before);
        }
    }
}
