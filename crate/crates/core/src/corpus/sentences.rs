//! Rule-based sentence splitter.

use std::collections::HashSet;
use std::sync::OnceLock;

const ABBREVIATIONS: &str = include_str!("../../data/abbreviations.txt");

/// Lower-cased abbreviations (with trailing period) that never end a sentence.
pub fn abbreviations() -> &'static HashSet<String> {
    static SET: OnceLock<HashSet<String>> = OnceLock::new();
    SET.get_or_init(|| {
        ABBREVIATIONS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(str::to_lowercase)
            .collect()
    })
}

fn is_terminal(c: char) -> bool {
    matches!(c, '.' | '!' | '?')
}

fn is_cjk_terminal(c: char) -> bool {
    matches!(c, '。' | '！' | '？')
}

fn is_closer(c: char) -> bool {
    matches!(c, '"' | '\'' | ')' | ']' | '”' | '’' | '»' | '」' | '』')
}

fn is_list_item(line: &str) -> bool {
    if line.starts_with("- ") || line.starts_with("* ") || line.starts_with("• ") || line.starts_with("+ ") {
        return true;
    }
    if line.starts_with('#') {
        return true;
    }
    let digits = line.chars().take_while(char::is_ascii_digit).count();
    digits > 0 && {
        let rest = &line[digits..];
        rest.starts_with(". ") || rest.starts_with(") ")
    }
}

/// Splits text into sentences.
///
/// Boundaries are `.`, `!` or `?` (plus trailing closing quotes/brackets)
/// followed by whitespace and a character that is not a lowercase letter,
/// unless the word ending in `.` is a known abbreviation. CJK full stops
/// always end a sentence. Bullet, numbered and heading lines are each one
/// sentence. Empty text gives an empty list.
pub fn split_sentences(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut block: Vec<&str> = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || is_list_item(line) {
            if !block.is_empty() {
                split_block(&block.join(" "), &mut out);
                block.clear();
            }
            if !line.is_empty() {
                out.push(line.to_string());
            }
        } else {
            block.push(line);
        }
    }
    if !block.is_empty() {
        split_block(&block.join(" "), &mut out);
    }
    out
}

fn split_block(block: &str, out: &mut Vec<String>) {
    let chars: Vec<char> = block.chars().collect();
    let mut start = 0;
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if is_cjk_terminal(c) {
            let mut j = i + 1;
            while j < chars.len() && (is_closer(chars[j]) || is_cjk_terminal(chars[j])) {
                j += 1;
            }
            push(&chars[start..j], out);
            start = j;
            i = j;
            continue;
        }
        if !is_terminal(c) {
            i += 1;
            continue;
        }
        let mut j = i + 1;
        while j < chars.len() && (is_terminal(chars[j]) || is_closer(chars[j])) {
            j += 1;
        }
        if j >= chars.len() {
            break;
        }
        let boundary = if chars[j].is_whitespace() {
            let k = (j..chars.len()).find(|&k| !chars[k].is_whitespace());
            match k {
                None => false,
                Some(k) => !chars[k].is_lowercase() && !ends_with_abbreviation(&chars[start..j]),
            }
        } else {
            // "end.Next": no space, but a lowercase word runs into a capital
            i > 0
                && chars[i - 1].is_lowercase()
                && chars[j].is_uppercase()
                && !ends_with_abbreviation(&chars[start..j])
        };
        if boundary {
            push(&chars[start..j], out);
            start = j;
        }
        i = j;
    }
    if start < chars.len() {
        push(&chars[start..], out);
    }
}

fn ends_with_abbreviation(span: &[char]) -> bool {
    let s: String = span.iter().collect();
    let word = s.split_whitespace().last().unwrap_or("");
    let word = word.trim_end_matches(is_closer).trim_start_matches(['(', '"', '\'']);
    word.ends_with('.') && abbreviations().contains(&word.to_lowercase())
}

fn push(span: &[char], out: &mut Vec<String>) {
    let s: String = span.iter().collect();
    let s = s.trim();
    if !s.is_empty() {
        out.push(s.to_string());
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_terminators() {
        assert_eq!(split_sentences("A. B? C!"), vec!["A.", "B?", "C!"]);
    }

    #[test]
    fn abbreviations_do_not_split() {
        assert_eq!(split_sentences("Dr. Smith arrived. He left."), vec!["Dr. Smith arrived.", "He left."]);
        assert_eq!(
            split_sentences("The U.S. Senate met. Many came, e.g. Jones. Done."),
            vec!["The U.S. Senate met.", "Many came, e.g. Jones.", "Done."]
        );
    }

    #[test]
    fn empty_and_whitespace() {
        assert!(split_sentences("").is_empty());
        assert!(split_sentences("  \n\n ").is_empty());
    }

    #[test]
    fn lowercase_continuation_and_decimals() {
        assert_eq!(split_sentences("It costs 3.5 dollars. approx. five. Yes."), vec!["It costs 3.5 dollars. approx. five.", "Yes."]);
    }

    #[test]
    fn quotes_stay_with_sentence() {
        assert_eq!(split_sentences("He said \"stop.\" Then he left."), vec!["He said \"stop.\"", "Then he left."]);
    }

    #[test]
    fn cjk_terminators() {
        assert_eq!(split_sentences("我来了。你好！好吗？"), vec!["我来了。", "你好！", "好吗？"]);
    }

    #[test]
    fn list_items_are_sentences() {
        let text = "Intro line one. Intro two.\n- first item\n- second item. Still second.\n1. numbered\n2) other\nWrapped\nline ends.";
        assert_eq!(
            split_sentences(text),
            vec![
                "Intro line one.",
                "Intro two.",
                "- first item",
                "- second item. Still second.",
                "1. numbered",
                "2) other",
                "Wrapped line ends."
            ]
        );
    }

    #[test]
    fn tagged_mock_sentences() {
        let s = split_sentences("Statement 1 holds for class 2 [[k2]]. Statement 9 holds for class 0 [[k0]].");
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn run_together_sentences() {
        assert_eq!(split_sentences("It ended.Next it began."), vec!["It ended.", "Next it began."]);
    }
}
