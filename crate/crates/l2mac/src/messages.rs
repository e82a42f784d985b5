//! Message taxonomy and the bounded context window.
//!
//! Everything the control unit feeds to or receives from the LLM is a
//! [`Message`]. The [`ContextWindow`] holds the committed dialog under a hard
//! token budget `c`; the [`MessageBuffer`] holds the messages produced during
//! one dialog turn, which are flushed into the window (or discarded on a
//! context reset) at turn end.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::TokenCounter;

/// Who produced a message.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    System,
    User,
    LlmResponse,
    FunctionResponse,
    Control,
}

/// A tool invocation carried by an LLM response. Arguments are kept as raw
/// JSON text so malformed provider output stays correctable in-loop instead
/// of failing at the transport layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolCallPayload {
    pub name: String,
    pub arguments: String,
}

/// One typed entry of the multi-turn dialog.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub kind: MessageKind,
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call: Option<ToolCallPayload>,
    pub token_count: usize,
}

impl Message {
    pub fn new(kind: MessageKind, content: impl Into<String>, counter: &dyn TokenCounter) -> Self {
        let content = content.into();
        let token_count = counter.count(&content);
        Message {
            kind,
            content,
            tool_call: None,
            token_count,
        }
    }

    pub fn system(content: impl Into<String>, counter: &dyn TokenCounter) -> Self {
        Message::new(MessageKind::System, content, counter)
    }

    pub fn user(content: impl Into<String>, counter: &dyn TokenCounter) -> Self {
        Message::new(MessageKind::User, content, counter)
    }

    pub fn control(content: impl Into<String>, counter: &dyn TokenCounter) -> Self {
        Message::new(MessageKind::Control, content, counter)
    }

    pub fn function_response(content: impl Into<String>, counter: &dyn TokenCounter) -> Self {
        Message::new(MessageKind::FunctionResponse, content, counter)
    }

    pub fn llm_response(
        content: impl Into<String>,
        tool_call: Option<ToolCallPayload>,
        counter: &dyn TokenCounter,
    ) -> Self {
        let content = content.into();
        let counted = match &tool_call {
            Some(tc) => counter.count(&Self::render_counted(&content, tc)),
            None => counter.count(&content),
        };
        Message {
            kind: MessageKind::LlmResponse,
            content,
            tool_call,
            token_count: counted,
        }
    }

    /// The text the tokenizer sees: content alone, or content joined with
    /// the tool call name and raw arguments. This definition is load-bearing
    /// for replay determinism and must not change.
    fn render_counted(content: &str, tc: &ToolCallPayload) -> String {
        format!("{}\n{}\n{}", content, tc.name, tc.arguments)
    }

    /// Text used for token accounting and for loop detection equality.
    pub fn counted_text(&self) -> String {
        match &self.tool_call {
            Some(tc) => Self::render_counted(&self.content, tc),
            None => self.content.clone(),
        }
    }

    /// Recomputes the cached count under `counter`.
    pub fn recount(&self, counter: &dyn TokenCounter) -> usize {
        counter.count(&self.counted_text())
    }
}

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("unwind margin {margin} must be smaller than the budget {budget}")]
    MarginNotBelowBudget { margin: usize, budget: usize },
    #[error("unwind impossible: pinned system message ({system_tokens} tokens) alone exceeds the margin {margin}")]
    UnwindImpossible { system_tokens: usize, margin: usize },
}

/// The ordered message list `C^t` with its token budget `c` and unwind
/// margin `b`.
#[derive(Debug, Clone)]
pub struct ContextWindow {
    messages: Vec<Message>,
    budget_c: usize,
    unwind_margin_b: usize,
}

impl ContextWindow {
    pub fn new(budget_c: usize, unwind_margin_b: usize) -> Result<Self, WindowError> {
        if unwind_margin_b == 0 || budget_c == 0 || unwind_margin_b >= budget_c {
            return Err(WindowError::MarginNotBelowBudget {
                margin: unwind_margin_b,
                budget: budget_c,
            });
        }
        Ok(ContextWindow {
            messages: Vec::new(),
            budget_c,
            unwind_margin_b,
        })
    }

    pub fn budget(&self) -> usize {
        self.budget_c
    }

    pub fn margin(&self) -> usize {
        self.unwind_margin_b
    }

    pub fn messages(&self) -> &[Message] {
        &self.messages
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn push(&mut self, message: Message) {
        self.messages.push(message);
    }

    /// Replaces the whole window, e.g. on a context reset.
    pub fn reset(&mut self, messages: Vec<Message>) {
        self.messages = messages;
    }

    pub fn extend<I: IntoIterator<Item = Message>>(&mut self, messages: I) {
        self.messages.extend(messages);
    }

    pub fn total_tokens(&self) -> usize {
        self.messages.iter().map(|m| m.token_count).sum()
    }

    /// Removes the oldest non-system messages until the window fits in the
    /// unwind margin `b`. The system message is pinned and never removed.
    /// Returns the removed messages in removal order.
    pub fn unwind_to_margin(&mut self) -> Result<Vec<Message>, WindowError> {
        let mut removed = Vec::new();
        while self.total_tokens() > self.unwind_margin_b {
            let victim = self
                .messages
                .iter()
                .position(|m| m.kind != MessageKind::System);
            match victim {
                Some(idx) => removed.push(self.messages.remove(idx)),
                None => {
                    return Err(WindowError::UnwindImpossible {
                        system_tokens: self.total_tokens(),
                        margin: self.unwind_margin_b,
                    })
                }
            }
        }
        Ok(removed)
    }
}

/// The additional-messages buffer accumulated during one dialog turn.
#[derive(Debug, Clone, Default)]
pub struct MessageBuffer {
    pending: Vec<Message>,
}

impl MessageBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, message: Message) {
        self.pending.push(message);
    }

    pub fn pending(&self) -> &[Message] {
        &self.pending
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.pending.iter().map(|m| m.token_count).sum()
    }

    pub fn drain(&mut self) -> Vec<Message> {
        std::mem::take(&mut self.pending)
    }

    pub fn clear(&mut self) {
        self.pending.clear();
    }
}

/// Sum of token counts over the window plus the turn buffer.
pub fn token_length(window: &ContextWindow, buffer: &MessageBuffer) -> usize {
    window.total_tokens() + buffer.total_tokens()
}

/// True iff committing the buffer would overflow the budget. The boundary is
/// inclusive: a total exactly equal to `c` still fits.
pub fn would_exceed(window: &ContextWindow, buffer: &MessageBuffer) -> bool {
    token_length(window, buffer) > window.budget()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::HeuristicTokenizer;
    use proptest::prelude::*;

    const T: HeuristicTokenizer = HeuristicTokenizer;

    /// Message whose heuristic count is exactly `tokens`.
    fn sized(kind: MessageKind, tokens: usize) -> Message {
        Message::new(kind, "x".repeat(tokens * 4), &T)
    }

    fn window_with(budget: usize, margin: usize, msgs: Vec<Message>) -> ContextWindow {
        let mut w = ContextWindow::new(budget, margin).unwrap();
        w.extend(msgs);
        w
    }

    #[test]
    fn token_length_empty_is_zero() {
        let w = ContextWindow::new(10, 5).unwrap();
        assert_eq!(token_length(&w, &MessageBuffer::new()), 0);
    }

    #[test]
    fn token_length_sums_window_and_buffer() {
        let w = window_with(
            1000,
            500,
            vec![sized(MessageKind::System, 10), sized(MessageKind::User, 22)],
        );
        let mut b = MessageBuffer::new();
        b.push(sized(MessageKind::LlmResponse, 5));
        assert_eq!(token_length(&w, &b), 37);
    }

    #[test]
    fn token_length_matches_independent_recount() {
        // oracle: ceil(chars/4) recomputed per message without Message::new
        let contents = ["hello there", "fn main() {}", "", "éé", "abcd"];
        let msgs: Vec<Message> = contents
            .iter()
            .map(|c| Message::user(*c, &T))
            .collect();
        let expected: usize = contents.iter().map(|c| (c.chars().count() + 3) / 4).sum();
        let w = window_with(1000, 500, msgs);
        assert_eq!(token_length(&w, &MessageBuffer::new()), expected);
    }

    #[test]
    fn would_exceed_boundary_is_inclusive() {
        let w = window_with(8192, 4096, vec![sized(MessageKind::System, 8192)]);
        assert!(!would_exceed(&w, &MessageBuffer::new()));

        let mut b = MessageBuffer::new();
        b.push(sized(MessageKind::User, 1));
        // 8193 against 8192
        assert!(would_exceed(&w, &b));

        let empty = ContextWindow::new(2, 1).unwrap();
        assert!(!would_exceed(&empty, &MessageBuffer::new()));
    }

    #[test]
    fn unwind_noop_when_already_under_margin() {
        let mut w = window_with(1000, 260, vec![sized(MessageKind::System, 50)]);
        let removed = w.unwind_to_margin().unwrap();
        assert!(removed.is_empty());
        assert_eq!(w.messages().len(), 1);
    }

    #[test]
    fn unwind_removes_oldest_non_system_first() {
        // {System:50, A:100, B:100, C:100}, b=260 -> {System:50, B:100, C:100}
        let a = sized(MessageKind::User, 100);
        let b = sized(MessageKind::LlmResponse, 100);
        let c = sized(MessageKind::FunctionResponse, 100);
        let mut w = window_with(
            1000,
            260,
            vec![sized(MessageKind::System, 50), a.clone(), b.clone(), c.clone()],
        );
        let removed = w.unwind_to_margin().unwrap();
        assert_eq!(removed, vec![a]);
        assert_eq!(w.messages().len(), 3);
        assert_eq!(w.messages()[0].kind, MessageKind::System);
        assert_eq!(w.messages()[1], b);
        assert_eq!(w.messages()[2], c);
        assert!(w.total_tokens() <= 260);
    }

    #[test]
    fn unwind_fails_when_system_alone_exceeds_margin() {
        let mut w = window_with(1000, 200, vec![sized(MessageKind::System, 300)]);
        match w.unwind_to_margin() {
            Err(WindowError::UnwindImpossible { .. }) => {}
            other => panic!("expected UnwindImpossible, got {other:?}"),
        }
    }

    #[test]
    fn llm_response_counts_tool_call_payload() {
        let plain = Message::llm_response("call it", None, &T);
        let with_call = Message::llm_response(
            "call it",
            Some(ToolCallPayload {
                name: "write_files".into(),
                arguments: "{\"files_and_contents\":[]}".into(),
            }),
            &T,
        );
        assert!(with_call.token_count > plain.token_count);
        assert_eq!(with_call.recount(&T), with_call.token_count);
    }

    fn arb_kind() -> impl Strategy<Value = MessageKind> {
        prop_oneof![
            Just(MessageKind::System),
            Just(MessageKind::User),
            Just(MessageKind::LlmResponse),
            Just(MessageKind::FunctionResponse),
            Just(MessageKind::Control),
        ]
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        (arb_kind(), ".{0,200}", proptest::option::of((r"[a-z_]{1,20}", ".{0,100}")))
            .prop_map(|(kind, content, call)| {
                let tool_call = match kind {
                    MessageKind::LlmResponse => call.map(|(name, arguments)| ToolCallPayload {
                        name,
                        arguments,
                    }),
                    _ => None,
                };
                match tool_call {
                    Some(tc) => Message::llm_response(content, Some(tc), &T),
                    None => Message::new(kind, content, &T),
                }
            })
    }

    proptest! {
        #[test]
        fn serialization_round_trips(msg in arb_message()) {
            let json = serde_json::to_string(&msg).unwrap();
            let back: Message = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back, msg);
        }

        #[test]
        fn would_exceed_is_monotone_under_append(
            sizes in proptest::collection::vec(0usize..50, 0..10),
            extra in 0usize..50,
            budget in 1usize..2000,
        ) {
            let margin = (budget / 2).max(1);
            if margin >= budget { return Ok(()); }
            let w = window_with(budget, margin,
                sizes.iter().map(|s| sized(MessageKind::User, *s)).collect());
            let mut b = MessageBuffer::new();
            let before = would_exceed(&w, &b);
            b.push(sized(MessageKind::User, extra));
            let after = would_exceed(&w, &b);
            // appending can only turn false into true, never true into false
            prop_assert!(!(before && !after));
        }

        #[test]
        fn unwind_preserves_suffix_and_fits_margin(
            sizes in proptest::collection::vec(1usize..80, 0..12),
            system in 1usize..40,
            margin in 50usize..400,
        ) {
            let budget = margin * 2 + 1;
            let mut msgs = vec![sized(MessageKind::System, system)];
            msgs.extend(sizes.iter().map(|s| sized(MessageKind::User, *s)));
            let original = msgs.clone();
            let mut w = window_with(budget, margin, msgs);
            if system > margin {
                prop_assert!(w.unwind_to_margin().is_err());
                return Ok(());
            }
            let removed = w.unwind_to_margin().unwrap();
            prop_assert!(w.total_tokens() <= margin);
            // survivors = original minus a prefix of its non-system messages,
            // order preserved, messages unmutated
            let mut rest: Vec<Message> = w.messages().to_vec();
            let mut merged = vec![rest.remove(0)]; // pinned system message
            merged.extend(removed);
            merged.extend(rest);
            prop_assert_eq!(merged, original);
        }
    }
}
