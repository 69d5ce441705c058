//! Prompt templates and verification question banks.
//!
//! A prompt template is plain text: the lines above a `---` line are the
//! system instruction, the rest is the user message. Placeholders are
//! written `{name}` and substituted in a single pass, so substituted text
//! is never expanded again. Unknown placeholders are left as written.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmenter::Stage;

#[derive(Debug, Error)]
pub enum TemplateError {
    #[error("cannot read template {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("template {name}: {msg}")]
    Invalid { name: String, msg: String },
    #[error("unknown template language '{0}' (expected en or zh)")]
    Language(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    #[default]
    En,
    Zh,
}

impl std::str::FromStr for Language {
    type Err = TemplateError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "en" => Ok(Language::En),
            "zh" => Ok(Language::Zh),
            other => Err(TemplateError::Language(other.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub system: String,
    pub user: String,
}

impl PromptTemplate {
    pub fn parse(name: &str, text: &str) -> Result<Self, TemplateError> {
        let mut system = Vec::new();
        let mut user = Vec::new();
        let mut seen_sep = false;
        for line in text.lines() {
            if !seen_sep && line.trim() == "---" {
                seen_sep = true;
            } else if seen_sep {
                user.push(line);
            } else {
                system.push(line);
            }
        }
        if !seen_sep {
            // no separator: the whole file is the user message
            std::mem::swap(&mut system, &mut user);
        }
        let user = user.join("\n").trim().to_string();
        if user.is_empty() {
            return Err(TemplateError::Invalid {
                name: name.into(),
                msg: "empty user message".into(),
            });
        }
        Ok(Self {
            system: system.join("\n").trim().to_string(),
            user,
        })
    }

    fn require(&self, name: &str, placeholder: &str) -> Result<(), TemplateError> {
        let token = format!("{{{placeholder}}}");
        if self.user.contains(&token) || self.system.contains(&token) {
            Ok(())
        } else {
            Err(TemplateError::Invalid {
                name: name.into(),
                msg: format!("missing {token} placeholder"),
            })
        }
    }
}

/// Substitutes `{key}` occurrences in one left-to-right pass.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(open) = rest.find('{') {
        out.push_str(&rest[..open]);
        let after = &rest[open + 1..];
        let hit = after.find('}').and_then(|close| {
            let key = &after[..close];
            vars.iter().find(|(k, _)| *k == key).map(|(_, v)| (close, *v))
        });
        match hit {
            Some((close, value)) => {
                out.push_str(value);
                rest = &after[close + 1..];
            }
            None => {
                out.push('{');
                rest = after;
            }
        }
    }
    out.push_str(rest);
    out
}

/// Every template the pipeline uses.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Templates {
    pub extract_image: PromptTemplate,
    pub extract_text: PromptTemplate,
    /// C1 to C4, in order.
    pub stages: [PromptTemplate; 4],
    pub direct: PromptTemplate,
    pub verify: PromptTemplate,
    pub reprompt_c3: String,
    pub reprompt_c4: String,
    pub reprompt_empty: String,
}

macro_rules! builtin {
    ($lang:literal) => {
        [
            (
                "extract_image.txt",
                include_str!(concat!("../templates/", $lang, "/extract_image.txt")),
            ),
            (
                "extract_text.txt",
                include_str!(concat!("../templates/", $lang, "/extract_text.txt")),
            ),
            ("c1.txt", include_str!(concat!("../templates/", $lang, "/c1.txt"))),
            ("c2.txt", include_str!(concat!("../templates/", $lang, "/c2.txt"))),
            ("c3.txt", include_str!(concat!("../templates/", $lang, "/c3.txt"))),
            ("c4.txt", include_str!(concat!("../templates/", $lang, "/c4.txt"))),
            (
                "direct.txt",
                include_str!(concat!("../templates/", $lang, "/direct.txt")),
            ),
            (
                "verify.txt",
                include_str!(concat!("../templates/", $lang, "/verify.txt")),
            ),
            (
                "reprompt_c3.txt",
                include_str!(concat!("../templates/", $lang, "/reprompt_c3.txt")),
            ),
            (
                "reprompt_c4.txt",
                include_str!(concat!("../templates/", $lang, "/reprompt_c4.txt")),
            ),
            (
                "reprompt_empty.txt",
                include_str!(concat!("../templates/", $lang, "/reprompt_empty.txt")),
            ),
            (
                "questions.json",
                include_str!(concat!("../templates/", $lang, "/questions.json")),
            ),
        ]
    };
}

const BUILTIN_EN: [(&str, &str); 12] = builtin!("en");
const BUILTIN_ZH: [(&str, &str); 12] = builtin!("zh");

fn builtin_file(lang: Language, name: &str) -> &'static str {
    let table = match lang {
        Language::En => &BUILTIN_EN,
        Language::Zh => &BUILTIN_ZH,
    };
    table
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .expect("builtin template table is complete")
}

/// Reads `name` from `dir` when it exists there, else the builtin copy.
fn source(lang: Language, dir: Option<&Path>, name: &str) -> Result<String, TemplateError> {
    if let Some(dir) = dir {
        let path = dir.join(name);
        if path.exists() {
            return fs::read_to_string(&path).map_err(|source| TemplateError::Io { path, source });
        }
    }
    Ok(builtin_file(lang, name).to_string())
}

impl Templates {
    pub fn builtin(lang: Language) -> Self {
        Self::load(lang, None).expect("builtin templates are valid")
    }

    /// Builtin templates for `lang`, with any file present in `dir`
    /// taking precedence.
    pub fn load(lang: Language, dir: Option<&Path>) -> Result<Self, TemplateError> {
        let prompt = |name: &str| -> Result<PromptTemplate, TemplateError> {
            PromptTemplate::parse(name, &source(lang, dir, name)?)
        };
        let t = Self {
            extract_image: prompt("extract_image.txt")?,
            extract_text: prompt("extract_text.txt")?,
            stages: [
                prompt("c1.txt")?,
                prompt("c2.txt")?,
                prompt("c3.txt")?,
                prompt("c4.txt")?,
            ],
            direct: prompt("direct.txt")?,
            verify: prompt("verify.txt")?,
            reprompt_c3: source(lang, dir, "reprompt_c3.txt")?.trim().to_string(),
            reprompt_c4: source(lang, dir, "reprompt_c4.txt")?.trim().to_string(),
            reprompt_empty: source(lang, dir, "reprompt_empty.txt")?.trim().to_string(),
        };
        t.extract_image.require("extract_image.txt", "input")?;
        t.extract_text.require("extract_text.txt", "input")?;
        for (i, s) in t.stages.iter().enumerate() {
            let name = format!("c{}.txt", i + 1);
            s.require(&name, "caption")?;
            s.require(&name, "feedback")?;
        }
        t.direct.require("direct.txt", "feedback")?;
        t.verify.require("verify.txt", "question")?;
        Ok(t)
    }

    pub fn stage(&self, stage: Stage) -> &PromptTemplate {
        match stage {
            Stage::C1 => &self.stages[0],
            Stage::C2 => &self.stages[1],
            Stage::C3 => &self.stages[2],
            Stage::C4 => &self.stages[3],
            Stage::Direct => &self.direct,
        }
    }
}

/// Verification questions per stage, with placeholders `{caption}`,
/// `{attribute}` and `{stage_output}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionBank {
    #[serde(rename = "C1")]
    pub c1: Vec<String>,
    #[serde(rename = "C2")]
    pub c2: Vec<String>,
    #[serde(rename = "C3")]
    pub c3: Vec<String>,
    #[serde(rename = "C4")]
    pub c4: Vec<String>,
}

impl QuestionBank {
    pub fn builtin(lang: Language) -> Self {
        Self::parse(builtin_file(lang, "questions.json")).expect("builtin bank is valid")
    }

    pub fn parse(text: &str) -> Result<Self, TemplateError> {
        let bank: Self = serde_json::from_str(text).map_err(|e| TemplateError::Invalid {
            name: "question bank".into(),
            msg: e.to_string(),
        })?;
        for (i, qs) in bank.stages().iter().enumerate() {
            if qs.is_empty() || qs.iter().any(|q| q.trim().is_empty()) {
                return Err(TemplateError::Invalid {
                    name: "question bank".into(),
                    msg: format!("stage C{} needs at least one nonempty question", i + 1),
                });
            }
        }
        Ok(bank)
    }

    pub fn load(path: &Path) -> Result<Self, TemplateError> {
        let text = fs::read_to_string(path).map_err(|source| TemplateError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    pub fn stages(&self) -> [&Vec<String>; 4] {
        [&self.c1, &self.c2, &self.c3, &self.c4]
    }

    /// Question `cursor` of 1-based `stage`.
    pub fn question(&self, stage: u8, cursor: usize) -> Option<&str> {
        self.stages()
            .get(usize::from(stage).checked_sub(1)?)
            .and_then(|qs| qs.get(cursor))
            .map(String::as_str)
    }

    pub fn counts(&self) -> c3_core::mdp::QuestionCounts {
        let s = self.stages();
        c3_core::mdp::QuestionCounts::new([s[0].len(), s[1].len(), s[2].len(), s[3].len()])
            .expect("validated on construction")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_single_pass() {
        let out = render("a {x} b {y} {z}", &[("x", "{y}"), ("y", "Y")]);
        assert_eq!(out, "a {y} b Y {z}");
    }

    #[test]
    fn render_unclosed_brace() {
        assert_eq!(render("{x", &[("x", "1")]), "{x");
        assert_eq!(render("}{x}", &[("x", "1")]), "}1");
    }

    #[test]
    fn parse_split() {
        let t = PromptTemplate::parse("t", "sys line\n---\nuser {input}\n").unwrap();
        assert_eq!(t.system, "sys line");
        assert_eq!(t.user, "user {input}");
        let t = PromptTemplate::parse("t", "only user").unwrap();
        assert_eq!(t.system, "");
        assert_eq!(t.user, "only user");
        assert!(PromptTemplate::parse("t", "sys\n---\n  \n").is_err());
    }

    #[test]
    fn builtins_load() {
        for lang in [Language::En, Language::Zh] {
            let t = Templates::builtin(lang);
            assert!(t.stages[2].user.contains("{c2}"));
            let bank = QuestionBank::builtin(lang);
            assert_eq!(bank.counts().total(), 8);
            assert!(bank.question(4, 1).is_some());
            assert!(bank.question(5, 0).is_none());
            assert!(bank.question(0, 0).is_none());
        }
    }

    #[test]
    fn directory_overrides_single_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("c1.txt"), "custom\n---\n{caption} {feedback}").unwrap();
        let t = Templates::load(Language::En, Some(dir.path())).unwrap();
        assert_eq!(t.stages[0].system, "custom");
        assert_eq!(t.stages[1], Templates::builtin(Language::En).stages[1]);
    }

    #[test]
    fn missing_placeholder_rejected() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("extract_text.txt"), "list attributes").unwrap();
        let err = Templates::load(Language::En, Some(dir.path())).unwrap_err();
        assert!(err.to_string().contains("{input}"), "{err}");
    }

    #[test]
    fn bank_rejects_empty_stage() {
        let text = r#"{"C1":["q"],"C2":[],"C3":["q"],"C4":["q"]}"#;
        assert!(QuestionBank::parse(text).is_err());
    }
}
