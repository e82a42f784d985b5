//! Fixed prompt templates used by the control unit and the feature judge.
//!
//! These strings are part of the replay contract: traces embed the rendered
//! messages, so any change here invalidates golden runs. Placeholders use
//! `{name}` and are substituted with plain string replacement, never format
//! machinery.

/// System message pinned at the head of every context window.
pub const SYSTEM_MESSAGE: &str = r#"Objective: Write code for a large system design task.
Please note that the code should be fully functional. No placeholders.
Only use the functions you have been provided with.
Only use the `write_files` to output code.

You must act autonomously and you will receive no human input at any stage. You have to return as output the complete code for completing this task, and correctly incorporate it into the existing codebase.
You always write out the whole file contents. You always indent code with tabs.
Please always view the files before writing to them, to make sure you are writing to the correct files.
When writing a test, make the filename start with the prefix 'test_'.

Provide the minimal code necessary to achieve the task conditioned on the existing generated code---including changing the existing generated code.

You cannot visualize any graphical output. You exist within a Actor Model machine, and when you list out steps, each step will be taken by a new separate sub-ChatGPT model. When you list out a sub-task steps, you can optionally specify the sub-task validation to check that it has been completed successfully.

You cannot use any databases as none are setup in the local environment, instead mock a database with an in memory dictionary to store data. No data saved to disk will persist between steps or write operations.

If a test is failing the error could be the code, or the test is incorrect, so feel free to overwrite and change the tests when they are incorrect, to make all tests pass.

Use the functions provided. When calling functions only provide a RFC8259 compliant JSON request following this format without deviation."#;

/// Bootstrap instruction wrapping the user-specified requirements; asks the
/// LLM to emit the whole step plan through the planning function.
pub const BOOTSTRAP_TEMPLATE: &str = r#"You will get instructions for code to write.
First lay out the names of the core classes, functions, methods that will be necessary, As well as a quick comment on their purpose.
Do not comment on what every file does. Please note that the code should be fully functional. No placeholders.

You will start with the "entrypoint" file, then go to the ones that are imported by that file, and so on.
Please note that the code should be fully functional. No placeholders.

Follow a language and framework appropriate best practice file naming convention.
Make sure that files contain all imports, types etc.  The code should be fully functional. Make sure that code in different files are compatible with each other.
When writing code if you are unsure, write a plausible implementation.
Include module dependency or package manager dependency definition file.

Useful to know:

For Python, you always create an appropriate requirements.txt file.
Always add a comment briefly describing the purpose of the function definition.
Add comments explaining very complex bits of logic.
Always follow the best practices for the requested languages for folder/file structure and how to package the project.
You can use any package and any other packages you wish to install.
You cannot use any databases as none are setup in the local environment, instead mock a database with an in memory dictionary to store data. No data saved to disk will persis between steps or write operations.
When writing a test, make the filename start with the prefix 'test_'.

Python toolbelt preferences:
- pytest
- dataclasses
- flask

Objective:```
{user_specified_feature_requirements}
```

Understand the problem, by creating an extremely detailed step-by-step plan, where each step is long (multiple sentences) and in total includes every single feature requirement specified above, feel free to copy directly from it. Use no more than 10 steps in the plan. Create additional tests, checks and evaluation at each step when applicable to help make an excellent code implementation, where all the code is fully functional. Use best software design practices, and you can output large amounts of code at once. Please include a last sentence to create and run tests when implementing or writing code in that same step. You will receive no human input at any stage, so you cannot use a human to test. Only create a detailed plan to begin with, which includes designing and running tests to check that they all pass. Please be sure to include all of the specified feature requirements in the following plan."#;

/// Cycle message loaded with a freshly started instruction.
pub const CYCLE_START_TEMPLATE: &str = "Objective: Execute sub task step: {instruction}.\n\n Note: Condition any new code files on the existing code files: {file_list}. Fully implement these features in the code, no placeholders. You can now optionally view the existing files if you need to view them to complete the current task step. You have a limited context window so be selective about which files you view, only view the files you think you might need to view.\n\nSummary output of previous step: \"\"{previous_instruction_output_summary}\"\"\n\nRespond now only with a function call of one of the following functions provided: {function_names}, and if you want to output code only use the `write_files` function to output code.";

/// Cycle message appended after each dialog turn while an instruction is
/// still in progress.
pub const CYCLE_CONTINUE_TEMPLATE: &str = "Has the sub task step been completed of: ```\n{instruction}\n``` \n\n If yes, call the function `sub_task_step_complete`, otherwise reflect and correct the full code to complete the task. Only use the functions you have been provided with, and if you want to output code only use the `write_files` function to output code. Condition it on existing code: {file_list} Fully implement these features in the code, no placeholders. If you have not viewed the files before writing to them, please view them, to make sure you are writing to the correct files.\nRespond now only with a function call of one of the following functions provided: {function_names}, and if you want to output code only use the `write_files` function to output code.";

/// Summarization request sent when an instruction completed cleanly; the
/// response seeds the next instruction's context.
pub const SUMMARIZE_FOR_NEXT_STEP: &str = "Please provide a one or two sentence summary of the output of this step, which is useful for the next step. Your response will be used when starting the next step without any of the previous messages.";

/// Summarization request sent when the context window overflowed; the
/// response seeds the restart of the same instruction.
pub const SUMMARIZE_FOR_RESTART: &str = "You have exhausted your context window. Reflect on your progress. Provide a short concise response, of two sentences maximum, this will be used to restart this step from the beginning without the previous messages.";

/// Judge prompt for the features-implemented metric.
pub const FEATURES_JUDGE_TEMPLATE: &str = r#"Objective: Based on the numbered features given, you are to evaluate the following code and return a numeric value for how many (a count) of those numbered features are implemented in the provided code. Give the numeric answer as "FEATURES_FUNCTIONAL=num_features_functional" in the final line.

Numbered Features Specified:```
{user_specified_feature_requirements}
```

Code to evaluate for the amount of features fully implemented:"""
{code_files}
""""#;

/// Renders a path list the way the cycle templates expect: `[]` or
/// `['app.py', 'tests/test_app.py']`.
pub fn render_file_list(paths: &[String]) -> String {
    if paths.is_empty() {
        return "[]".to_string();
    }
    let quoted: Vec<String> = paths.iter().map(|p| format!("'{p}'")).collect();
    format!("[{}]", quoted.join(", "))
}

/// Renders function names as backtick-quoted identifiers: `` `a`, `b` ``.
pub fn render_function_names(names: &[&str]) -> String {
    let quoted: Vec<String> = names.iter().map(|n| format!("`{n}`")).collect();
    quoted.join(", ")
}

pub fn render_bootstrap(task_prompt: &str) -> String {
    BOOTSTRAP_TEMPLATE.replace("{user_specified_feature_requirements}", task_prompt)
}

pub fn render_cycle_start(
    instruction: &str,
    files: &[String],
    previous_summary: &str,
    function_names: &[&str],
) -> String {
    CYCLE_START_TEMPLATE
        .replace("{instruction}", instruction)
        .replace("{file_list}", &render_file_list(files))
        .replace(
            "{previous_instruction_output_summary}",
            previous_summary,
        )
        .replace("{function_names}", &render_function_names(function_names))
}

pub fn render_cycle_continue(
    instruction: &str,
    files: &[String],
    function_names: &[&str],
) -> String {
    CYCLE_CONTINUE_TEMPLATE
        .replace("{instruction}", instruction)
        .replace("{file_list}", &render_file_list(files))
        .replace("{function_names}", &render_function_names(function_names))
}

pub fn render_features_judge(task_prompt: &str, code_files: &str) -> String {
    FEATURES_JUDGE_TEMPLATE
        .replace("{user_specified_feature_requirements}", task_prompt)
        .replace("{code_files}", code_files)
}
