use std::path::Path;

use super::NluError;

/// `(text, intent)` pairs.
pub type Corpus = Vec<(String, String)>;

/// Parses `text<TAB>intent` lines. Blank lines and lines starting with `#`
/// are skipped.
pub fn parse_corpus(text: &str) -> Result<Corpus, NluError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (t, intent) = line
            .split_once('\t')
            .ok_or_else(|| NluError::Corpus(format!("line {}: expected text<TAB>intent", n + 1)))?;
        let (t, intent) = (t.trim(), intent.trim());
        if t.is_empty() || intent.is_empty() || intent.contains('\t') {
            return Err(NluError::Corpus(format!("line {}: malformed entry", n + 1)));
        }
        out.push((t.to_string(), intent.to_string()));
    }
    Ok(out)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus, NluError> {
    let text = std::fs::read_to_string(path.as_ref())
        .map_err(|e| NluError::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_corpus(&text)
}

pub fn write_corpus(corpus: &[(String, String)]) -> String {
    corpus.iter().map(|(t, i)| format!("{t}\t{i}\n")).collect()
}

/// Training corpus: the experiment commands plus paraphrases.
pub fn desk_corpus() -> Corpus {
    parse_corpus(include_str!("../../assets/desk_corpus.tsv")).expect("shipped corpus parses")
}

/// Paraphrases absent from [`desk_corpus`], for held-out evaluation.
pub fn desk_heldout() -> Corpus {
    parse_corpus(include_str!("../../assets/desk_heldout.tsv")).expect("shipped corpus parses")
}

/// The experiment commands by id.
pub const EXPERIMENT_COMMANDS: &[(&str, &str, &str)] = &[
    ("A", "Open the door", "open_door"),
    ("B", "Please open the door", "open_door"),
    ("C", "Please have the door open", "open_door"),
    ("A1", "Switch on the light", "light_on"),
    ("A2", "Please have the light on", "light_on"),
    ("A3", "Turn up the brightness in this room", "light_on"),
    ("A4", "It's so dark here, light up please", "light_on"),
    ("B1", "Switch off the light", "light_off"),
    ("B2", "Please have the light off", "light_off"),
    ("B3", "Turn down the brightness in this room", "light_off"),
    ("B4", "I am gonna sleep, light off please", "light_off"),
    ("C1", "Please hand me the water cup", "fetch_object"),
    ("C2", "Pass me a cup of water", "fetch_object"),
    ("C3", "Pass me the paper cup", "fetch_object"),
    ("C4", "I'm thirsty. I need some water", "fetch_object"),
];

pub fn experiment_command(id: &str) -> Option<(&'static str, &'static str)> {
    EXPERIMENT_COMMANDS
        .iter()
        .find(|(i, _, _)| *i == id)
        .map(|&(_, t, intent)| (t, intent))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_corpora() {
        let train = desk_corpus();
        let held = desk_heldout();
        for (_, text, intent) in EXPERIMENT_COMMANDS {
            assert!(train.iter().any(|(t, i)| t == text && i == intent), "{text}");
        }
        for intent in ["open_door", "light_on", "light_off", "fetch_object"] {
            assert!(train.iter().filter(|(_, i)| i == intent).count() >= 13);
            assert!(held.iter().any(|(_, i)| i == intent));
        }
        assert!(held.iter().all(|h| !train.contains(h)));
    }

    #[test]
    fn parse_errors_carry_line() {
        let err = parse_corpus("ok\tlight_on\n\nno tab here\n").unwrap_err();
        assert!(err.to_string().contains("line 3"));
        let round = parse_corpus(&write_corpus(&desk_corpus())).unwrap();
        assert_eq!(round, desk_corpus());
    }
}
