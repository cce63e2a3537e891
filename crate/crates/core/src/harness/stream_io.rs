use super::dataset::{detokenize, tokenize, EditStream, SyntheticWorld};
use crate::editor::EditExample;
use crate::error::{Result, WiseError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// File next to a stream that lists irrelevant prompts, one per line.
pub const IRRELEVANT_FILE: &str = "irrelevant.txt";

#[derive(Serialize, Deserialize)]
struct Record {
    prompt: String,
    target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paraphrase: Option<String>,
    locality: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    original: Option<String>,
}

pub fn stream_to_jsonl(stream: &EditStream) -> Result<String> {
    let text = |t: &Option<Vec<u32>>| t.as_deref().map(detokenize).transpose();
    let mut out = String::new();
    for ex in &stream.examples {
        let rec = Record {
            prompt: detokenize(&ex.prompt)?,
            target: detokenize(&ex.target)?,
            paraphrase: text(&ex.paraphrase)?,
            locality: detokenize(&ex.locality)?,
            original: text(&ex.original)?,
        };
        out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Parses line-delimited records. Blank lines are skipped; line numbers
/// in errors start at 1.
pub fn stream_from_jsonl(text: &str) -> Result<EditStream> {
    let mut examples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| WiseError::Parse { line: i + 1, msg };
        let rec: Record = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        if rec.target.is_empty() || rec.prompt.is_empty() {
            return Err(parse("empty prompt or target".into()));
        }
        examples.push(EditExample {
            prompt: tokenize(&rec.prompt),
            target: tokenize(&rec.target),
            paraphrase: rec.paraphrase.as_deref().map(tokenize),
            locality: tokenize(&rec.locality),
            original: rec.original.as_deref().map(tokenize),
        });
    }
    Ok(EditStream {
        examples,
        corpus_ref: None,
    })
}

pub fn save_stream(stream: &EditStream, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, stream_to_jsonl(stream)?)?;
    Ok(())
}

/// Loads a stream and points `corpus_ref` at a sibling irrelevant-prompt
/// file when one exists.
pub fn load_stream(path: impl AsRef<Path>) -> Result<EditStream> {
    let path = path.as_ref();
    let mut stream = stream_from_jsonl(&fs::read_to_string(path)?)?;
    let sibling = path.with_file_name(IRRELEVANT_FILE);
    if sibling.is_file() {
        stream.corpus_ref = Some(sibling);
    }
    Ok(stream)
}

/// One non-empty line per entry.
pub fn read_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(fs::read_to_string(path)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::to_string)
        .collect())
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

/// Writes `stream.jsonl`, `corpus.txt`, `irrelevant.txt` and `held_out.txt`.
pub fn save_world(world: &SyntheticWorld, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    save_stream(&world.stream, dir.join("stream.jsonl"))?;
    write_lines(&dir.join("corpus.txt"), &world.corpus)?;
    write_lines(&dir.join(IRRELEVANT_FILE), &world.irrelevant)?;
    write_lines(&dir.join("held_out.txt"), &world.held_out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::{gen_dataset, DatasetConfig};

    #[test]
    fn save_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let world = gen_dataset(&DatasetConfig::new(3, 12)).unwrap();
        save_world(&world, dir.path()).unwrap();
        let back = load_stream(dir.path().join("stream.jsonl")).unwrap();
        assert_eq!(back.examples, world.stream.examples);
        assert_eq!(back.corpus_ref, Some(dir.path().join(IRRELEVANT_FILE)));
        assert_eq!(read_lines(dir.path().join("corpus.txt")).unwrap(), world.corpus);
    }

    #[test]
    fn missing_target_names_the_line() {
        let text = "{\"prompt\":\"a b\",\"target\":\" c\",\"locality\":\"d\"}\n\
                    {\"prompt\":\"x y\",\"locality\":\"d\"}\n";
        match stream_from_jsonl(text) {
            Err(WiseError::Parse { line, msg }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("target"), "{msg}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn omitted_paraphrase_is_absent() {
        let s = stream_from_jsonl("{\"prompt\":\"a b\",\"target\":\" c\",\"locality\":\"d\"}").unwrap();
        assert_eq!(s.examples[0].paraphrase, None);
        assert_eq!(s.examples[0].target, tokenize(" c"));
    }
}
