//! JSON Lines corpus files: `{"text": ..., "lang": ..., "script"?: ...}`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{CorpusDoc, CorpusError, ScriptTable};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JsonlRecord {
    pub text: String,
    pub lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub script: Option<String>,
}

pub fn read_jsonl<R: BufRead>(reader: R, table: &ScriptTable) -> Result<Vec<CorpusDoc>, CorpusError> {
    let mut docs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| CorpusError::Parse { line: i + 1, message };
        let rec: JsonlRecord = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let declared = match &rec.script {
            Some(name) => Some(
                table
                    .by_name(name)
                    .ok_or_else(|| CorpusError::UnknownScriptName(name.clone()))?,
            ),
            None => None,
        };
        let doc = CorpusDoc::new(&rec.text, &rec.lang, declared, table)
            .map_err(|e| parse_err(e.to_string()))?;
        docs.push(doc);
    }
    Ok(docs)
}

pub fn write_jsonl<W: Write>(mut writer: W, docs: &[CorpusDoc], table: &ScriptTable) -> Result<(), CorpusError> {
    for doc in docs {
        let rec = JsonlRecord {
            text: doc.text.clone(),
            lang: doc.lang.clone(),
            script: table.name(doc.script).map(str::to_string),
        };
        let line = serde_json::to_string(&rec).map_err(|e| CorpusError::Parse {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(writer, "{line}")?;
    }
    Ok(())
}
