//! Prompt templates shipped as text assets, with `{name}` placeholders.

pub const UNDERSTANDING_MATH: &str = include_str!("../assets/understanding_math.txt");
pub const UNDERSTANDING_QA: &str = include_str!("../assets/understanding_qa.txt");
pub const SOLVE_MATH: &str = include_str!("../assets/solve_math.txt");
pub const SOLVE_CODE: &str = include_str!("../assets/solve_code.txt");
pub const SOLVE_QA: &str = include_str!("../assets/solve_qa.txt");
pub const VERIFY_MATH: &str = include_str!("../assets/verify_math.txt");
pub const VERIFY_QA: &str = include_str!("../assets/verify_qa.txt");
pub const REFINE: &str = include_str!("../assets/refine.txt");

pub const ALL: &[(&str, &str)] = &[
    ("understanding_math", UNDERSTANDING_MATH),
    ("understanding_qa", UNDERSTANDING_QA),
    ("solve_math", SOLVE_MATH),
    ("solve_code", SOLVE_CODE),
    ("solve_qa", SOLVE_QA),
    ("verify_math", VERIFY_MATH),
    ("verify_qa", VERIFY_QA),
    ("refine", REFINE),
];

/// Substitutes `{key}` for each pair. Other braces (the JSON skeletons in
/// the templates) are left alone.
pub fn render(template: &str, values: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (k, v) in values {
        out = out.replace(&format!("{{{k}}}"), v);
    }
    out
}

/// Placeholder names that appear in `template`.
pub fn placeholders(template: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        rest = &rest[start + 1..];
        let Some(end) = rest.find('}') else { break };
        let name = &rest[..end];
        if !name.is_empty()
            && name.chars().all(|c| c.is_ascii_lowercase() || c == '_')
            && !out.iter().any(|n| n == name)
        {
            out.push(name.to_string());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refinement_template_has_its_placeholders() {
        assert_eq!(
            placeholders(REFINE),
            [
                "problem_text",
                "previous_answer",
                "verdict",
                "failure_reason",
                "root_cause",
                "step_description"
            ]
        );
    }

    #[test]
    fn render_fills_every_placeholder() {
        for (name, t) in ALL {
            let names = placeholders(t);
            assert!(!names.is_empty(), "{name}");
            let values: Vec<(&str, &str)> = names.iter().map(|n| (n.as_str(), "X")).collect();
            let out = render(t, &values);
            assert!(placeholders(&out).is_empty(), "{name}: {out}");
        }
    }

    #[test]
    fn render_keeps_json_braces() {
        let out = render(
            VERIFY_MATH,
            &[("problem_text", "2+2"), ("answer", "4"), ("answer_form", "number")],
        );
        assert!(out.contains("\"verdict\": \"PASS\" or \"FAIL\""));
        assert!(out.contains("Problem: 2+2\nCandidate Answer: 4\n"));
        assert!(out.trim_end().ends_with('}'));
    }
}
