//! Shared test doubles and fixtures.
#![allow(dead_code)]

use std::collections::BTreeSet;

use tagevol::gateway::{Backend, BackendError, ChatRequest};
use tagevol::sha256_hex;
use tagevol::ChatResponse;

pub const TAGGING_HEAD: &str = "You are a tagging system";
pub const REWRITE_HEAD: &str = "You are an Instruction Rewriter";

/// Deterministic stand-in for a chat model. It reads the rendered prompt,
/// answers tagging and rewriting prompts in the expected reply formats and
/// echoes anything else as a response. Misbehaviour is driven by a hash of
/// the prompt, so the same prompt always gets the same reply.
#[derive(Debug, Clone, Default)]
pub struct SyntheticModel {
    /// Probability that a tagging/rewriting reply is malformed.
    pub malformed_rate: f64,
    /// Probability that a rewriting reply breaks one selection constraint.
    pub violation_rate: f64,
    /// Probability that a response request fails with HTTP 500.
    pub response_failure_rate: f64,
    pub salt: u64,
}

/// What the model intended to write for a rewriting prompt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IntendedRewrite {
    pub subset: Vec<String>,
    pub plan: String,
    pub final_instruction: String,
}

pub fn between<'a>(text: &'a str, start: &str, end: &str) -> Option<&'a str> {
    let from = text.find(start)? + start.len();
    let to = text[from..].find(end)? + from;
    Some(&text[from..to])
}

fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| w.len() > 2)
        .map(str::to_lowercase)
        .collect()
}

fn norm(text: &str) -> String {
    text.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}

impl SyntheticModel {
    pub fn well_behaved() -> Self {
        Self::default()
    }

    fn unit(&self, label: &str, prompt: &str) -> f64 {
        let h = sha256_hex(format!("{}|{label}|{prompt}", self.salt));
        u64::from_str_radix(&h[..16], 16).unwrap() as f64 / u64::MAX as f64
    }

    fn pick(&self, label: &str, prompt: &str, n: usize) -> usize {
        ((self.unit(label, prompt) * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn tagging_reply(&self, prompt: &str) -> String {
        let instruction = between(prompt, "#Task ", "\nPlease follow the steps below").unwrap_or("");
        let ws = words(instruction);
        let skills: Vec<String> = ws.iter().take(3).map(|w| format!("{w} handling")).collect();
        let topics: Vec<String> = ws.iter().rev().take(2).map(|w| format!("{w} topic")).collect();
        let mut object = serde_json::Map::new();
        object.insert("Required skill".into(), serde_json::json!(skills));
        object.insert("Topic".into(), serde_json::json!(topics));
        object.insert("Task type".into(), serde_json::json!(["instruction following"]));
        let body = serde_json::Value::Object(object).to_string();
        if self.unit("malformed", prompt) < self.malformed_rate {
            return format!("Step 1 #Aspect List and Explanation#: skills, topics\nStep 2: {body}");
        }
        format!("Step 1 #Aspect List and Explanation#: Required skill, Topic, Task type.\nStep 2 #Aspect2Tags#:\n\n#Aspect2Tags#\n{body}")
    }

    /// The rewrite this model produces for `prompt` when it does not
    /// malfunction.
    pub fn intended_rewrite(&self, prompt: &str) -> IntendedRewrite {
        let instruction = between(prompt, "Here is the #Instruction#: ", "\n\nHere is the #Tag List#:").unwrap();
        let list = between(prompt, "Here is the #Tag List#:\n", "\n").unwrap();
        let cand: Vec<String> = serde_json::from_str(list).unwrap();
        let budget: usize = between(prompt, "The subset should contain ", " tags").unwrap().parse().unwrap();

        let original = norm(instruction);
        let mut subset: Vec<String> = cand.iter().filter(|t| !original.contains(t.as_str())).take(budget).cloned().collect();
        let mut short = false;
        if self.unit("violate", prompt) < self.violation_rate {
            match self.pick("which", prompt, 4) {
                0 => {
                    if let Some(extra) = cand.iter().find(|t| !subset.contains(t)) {
                        subset.push(extra.clone());
                    } else {
                        subset.pop();
                    }
                }
                1 => {
                    subset.pop();
                    subset.push("tag outside the batch".into());
                }
                2 => {
                    let present = words(instruction).into_iter().next().unwrap_or_else(|| "x".into());
                    subset.pop();
                    subset.push(present);
                }
                _ => short = true,
            }
        }

        let mut added: Vec<String> = vec!["while".into(), "covering".into()];
        for t in &subset {
            added.extend(t.split_whitespace().map(str::to_string));
        }
        let ceiling = 20 * budget;
        let target = if short { 3 } else { (10 + self.pick("len", prompt, 10 * budget)).max(added.len()).min(ceiling) };
        let mut k = 0;
        while added.len() < target {
            added.push(format!("detail{k}"));
            k += 1;
        }
        added.truncate(if short { 3 } else { ceiling });
        IntendedRewrite {
            subset: subset.clone(),
            plan: format!("Weave {} into the task.", subset.join(" and ")),
            final_instruction: format!("{} {}.", instruction.trim_end_matches('.'), added.join(" ")),
        }
    }

    pub fn rewrite_reply(&self, prompt: &str) -> String {
        let r = self.intended_rewrite(prompt);
        let subset = format!("[{}]", r.subset.iter().map(|t| format!("'{t}'")).collect::<Vec<_>>().join(", "));
        let full = format!(
            "Step 1 #Tag subset#: {subset}\nStep 2 #Plan#: {}\nStep 3 #Rewritten Instruction#: {}\nStep 4 #Finally Rewritten Instruction#: {}",
            r.plan, r.final_instruction, r.final_instruction
        );
        if self.unit("malformed", prompt) < self.malformed_rate {
            return match self.pick("how", prompt, 2) {
                0 => full.split("Step 4").next().unwrap().to_string(),
                _ => "I am sorry, but I cannot rewrite this instruction.".into(),
            };
        }
        full
    }
}

impl Backend for SyntheticModel {
    fn call(&self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let prompt = request.rendered_prompt();
        let text = if prompt.starts_with(TAGGING_HEAD) {
            self.tagging_reply(&prompt)
        } else if prompt.starts_with(REWRITE_HEAD) {
            self.rewrite_reply(&prompt)
        } else {
            if self.unit("respond", &prompt) < self.response_failure_rate {
                return Err(BackendError::Status {
                    code: 500,
                    body: "overloaded".into(),
                });
            }
            let head: Vec<&str> = prompt.split_whitespace().take(6).collect();
            format!("Answer: {}", head.join(" "))
        };
        Ok(ChatResponse::text(text))
    }
}

/// Seed instructions with varied vocabulary.
pub fn seed_instructions(n: usize) -> Vec<String> {
    const VERBS: [&str; 8] = ["Reverse", "Sort", "Count", "Summarize", "Compute", "Explain", "Translate", "Classify"];
    const OBJECTS: [&str; 10] = [
        "the string given in the input",
        "a list of integers",
        "the vowels in a sentence",
        "a short news article",
        "the area of a triangle",
        "how binary search works",
        "a greeting into French",
        "customer reviews by sentiment",
        "the prime factors of 360",
        "a recipe for pancakes",
    ];
    (0..n)
        .map(|i| format!("{} {} (case {i}).", VERBS[i % VERBS.len()], OBJECTS[(i * 7 + i / 3) % OBJECTS.len()]))
        .collect()
}

pub fn seed_jsonl(n: usize) -> String {
    seed_instructions(n)
        .iter()
        .enumerate()
        .map(|(i, text)| serde_json::json!({"id": format!("seed-{i}"), "instruction": text}).to_string() + "\n")
        .collect()
}

/// Independent check of the selection constraints on an evolved record.
pub fn constraints_hold(selected: &[String], candidates: &[String], budget: usize, parent: &str) -> bool {
    let cand: BTreeSet<&String> = candidates.iter().collect();
    let distinct: BTreeSet<&String> = selected.iter().collect();
    let parent = norm(parent);
    distinct.len() == budget
        && selected.len() == budget
        && selected.iter().all(|t| cand.contains(t))
        && selected.iter().all(|t| !parent.contains(t.as_str()))
}

/// Four-step replies reconstructed from published case studies: the final
/// instructions and tag subsets are verbatim, the plans and intermediate
/// rewrites are filler.
pub mod case_studies {
    pub const CODE_ORIGINAL: &str = "Reverse the string given in the input";
    pub const MATH_ORIGINAL: &str = "Expand $(x-2)(x+2)(x^2+4)$.";

    pub struct Case {
        pub budget: usize,
        pub subset: &'static [&'static str],
        pub final_instruction: &'static str,
    }

    pub const CODE: [Case; 3] = [
        Case {
            budget: 1,
            subset: &["basic math calculations"],
            final_instruction: "Reverse the string given in the input and multiply its length by 2.",
        },
        Case {
            budget: 3,
            subset: &["form processing", "letters and numbers", "basic math calculations"],
            final_instruction: "Reverse the string given in the input, ensuring it contains both letters and numbers. Process the form to validate the input, and if the string length is even, append the sum of the digits in the string to the reversed output.",
        },
        Case {
            budget: 5,
            subset: &["form processing", "letters and numbers", "coding example", "basic math calculations", "third character"],
            final_instruction: "Reverse the string given in the input, but first, process the input form to ensure it contains both letters and numbers. For each letter, convert it to its corresponding ASCII value, and for each number, double it. Then, calculate the position of the third character in the modified string and append this position to the end of the reversed string. Provide a coding example to demonstrate the process.",
        },
    ];

    pub const MATH: [Case; 3] = [
        Case {
            budget: 1,
            subset: &["conditions on variables"],
            final_instruction: "Expand $(x-2)(x+2)(x^2+4)$, given that $x$ is an integer such that $x > 0$.",
        },
        Case {
            budget: 3,
            subset: &["conditions on variables", "sequential operations", "polygon perimeter"],
            final_instruction: "Expand $(x-2)(x+2)(x^2+4)$ for $x > 0$, then use the result to find the perimeter of a square whose side length is the square root of the expanded expression evaluated at $x = 3$.",
        },
        Case {
            budget: 5,
            subset: &["conditions on variables", "factor", "evaluating trigonometric functions", "sequential operations", "integer sum problem"],
            final_instruction: "Expand $(x-2)(x+2)(x^2+4)$, where $x$ is an integer such that $-3 \\leq x \\leq 3$. Factor the expanded polynomial, if possible, and then evaluate $\\sin(\\pi \\cdot \\text{expanded polynomial})$. Find the sum of all integer values of $x$ for which the result is an integer.",
        },
    ];

    /// A reply in the requested four-step format for `case`.
    pub fn reply(case: &Case) -> String {
        let subset = case.subset.iter().map(|t| format!("'{t}'")).collect::<Vec<_>>().join(", ");
        format!(
            "Step 1 #Tag subset#:\n[{subset}]\n\nStep 2 #Plan#:\nIntegrate each selected tag into the task as an explicit requirement.\n\nStep 3 #Rewritten Instruction#:\n{}\n\nStep 4 #Finally Rewritten Instruction#:\n{}",
            case.final_instruction, case.final_instruction
        )
    }
}
