use std::collections::HashSet;

/// Pulls entity or keyword mentions out of a text, already normalized.
pub trait EntityExtractor: Send + Sync {
    fn extract(&self, text: &str) -> Vec<String>;
}

const STOPWORDS: &[&str] = &[
    "a", "an", "and", "are", "as", "at", "but", "by", "for", "from", "he", "her", "his", "i", "if",
    "in", "is", "it", "its", "my", "no", "not", "of", "on", "or", "our", "she", "so", "that", "the",
    "their", "then", "there", "these", "they", "this", "those", "to", "was", "we", "what", "when",
    "where", "which", "who", "why", "with", "you", "your",
];

/// Maximal runs of capitalized tokens plus numeric tokens, lowercased. A
/// stopword opening a sentence is not part of a run.
#[derive(Debug, Clone, Default)]
pub struct CapitalizedRuns;

fn strip(token: &str) -> &str {
    token.trim_matches(|c: char| !c.is_alphanumeric())
}

fn is_numeric(word: &str) -> bool {
    word.chars().any(|c| c.is_ascii_digit())
        && word.chars().all(|c| c.is_ascii_digit() || ".,-/:%".contains(c))
}

fn is_capitalized(word: &str) -> bool {
    word.chars().next().is_some_and(char::is_uppercase)
}

fn ends_sentence(token: &str) -> bool {
    token.ends_with(['.', '!', '?'])
}

fn ends_run(token: &str) -> bool {
    token.ends_with(['.', ',', ';', ':', '!', '?', ')', '"'])
}

impl EntityExtractor for CapitalizedRuns {
    fn extract(&self, text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut run: Vec<&str> = Vec::new();
        let mut run_at_start = false;
        let mut sentence_start = true;
        let flush = |run: &mut Vec<&str>, at_start: bool, out: &mut Vec<String>| {
            if at_start && run.first().is_some_and(|w| STOPWORDS.contains(&w.to_lowercase().as_str())) {
                run.remove(0);
            }
            if !run.is_empty() {
                out.push(run.join(" ").to_lowercase());
            }
            run.clear();
        };
        for token in text.split_whitespace() {
            let word = strip(token);
            if is_numeric(word) {
                flush(&mut run, run_at_start, &mut out);
                out.push(word.to_lowercase());
            } else if !word.is_empty() && is_capitalized(word) {
                if run.is_empty() {
                    run_at_start = sentence_start;
                }
                run.push(word);
                if ends_run(token) {
                    flush(&mut run, run_at_start, &mut out);
                }
            } else {
                flush(&mut run, run_at_start, &mut out);
            }
            sentence_start = ends_sentence(token);
        }
        flush(&mut run, run_at_start, &mut out);
        out
    }
}

fn normalized_tokens(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|t| strip(t).to_lowercase())
        .filter(|t| !t.is_empty())
        .collect()
}

/// Mention occurrences in `samples` whose surface never appears, on token
/// boundaries, in any of `training_texts`.
pub fn novel_entity_count<S: AsRef<str>, T: AsRef<str>>(
    samples: &[S],
    training_texts: &[T],
    extractor: &dyn EntityExtractor,
) -> usize {
    let mentions: Vec<String> = samples.iter().flat_map(|s| extractor.extract(s.as_ref())).collect();
    let longest = mentions.iter().map(|m| m.split(' ').count()).max().unwrap_or(0);
    let mut known: HashSet<String> = HashSet::new();
    for text in training_texts {
        let tokens = normalized_tokens(text.as_ref());
        for n in 1..=longest.min(tokens.len()) {
            for w in tokens.windows(n) {
                known.insert(w.join(" "));
            }
        }
    }
    mentions.iter().filter(|m| !known.contains(*m)).count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extractor_runs_and_numbers() {
        let e = CapitalizedRuns;
        assert_eq!(
            e.extract("The Red Cross met in New York on 12 May, said John."),
            vec!["red cross", "new york", "12", "may", "john"]
        );
        assert_eq!(e.extract("It rained. He left."), Vec::<String>::new());
        assert_eq!(e.extract("Paris is big."), vec!["paris"]);
    }

    #[test]
    fn novel_entities() {
        let train = [
            "The Red Cross met in New York on 12 May.",
            "John Smith visited the old port.",
        ];
        let e = CapitalizedRuns;
        assert_eq!(novel_entity_count(&train, &train, &e), 0);
        let mut samples: Vec<&str> = train.to_vec();
        samples.push("Yesterday the envoy Zorbulon Vex visited the old port.");
        // "Yesterday" is a lone capitalized sentence opener but not a stopword
        assert_eq!(novel_entity_count(&samples, &train, &e), 2);
        samples.pop();
        samples.push("The envoy Zorbulon Vex visited the old port.");
        assert_eq!(novel_entity_count(&samples, &train, &e), 1);
        assert_eq!(novel_entity_count::<&str, &str>(&[], &train, &e), 0);
    }

    #[test]
    fn monotone_in_training_texts() {
        let e = CapitalizedRuns;
        let samples = ["Alice met Bob in Rome.", "Carol flew to Oslo in 1999."];
        let mut train: Vec<&str> = vec![];
        let mut last = novel_entity_count(&samples, &train, &e);
        for t in ["Alice was here.", "Rome and Oslo", "in 1999 Carol and Bob"] {
            train.push(t);
            let now = novel_entity_count(&samples, &train, &e);
            assert!(now <= last);
            last = now;
        }
        assert_eq!(last, 0);
    }
}
