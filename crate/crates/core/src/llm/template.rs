use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message { role: Role::System, content: content.into() }
    }
    pub fn user(content: impl Into<String>) -> Self {
        Message { role: Role::User, content: content.into() }
    }
    pub fn assistant(content: impl Into<String>) -> Self {
        Message { role: Role::Assistant, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemplateMessage {
    pub role: Role,
    pub text: String,
}

/// Role-structured prompt with `{{name}}` placeholders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub name: String,
    #[serde(default)]
    pub placeholders: Vec<String>,
    pub messages: Vec<TemplateMessage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rendered {
    pub messages: Vec<Message>,
    pub warnings: Vec<String>,
}

fn placeholder_re() -> &'static Regex {
    use std::sync::OnceLock;
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\{\{\s*([A-Za-z_][A-Za-z0-9_]*)\s*\}\}").unwrap())
}

impl PromptTemplate {
    pub fn new(name: &str, placeholders: &[&str], messages: Vec<(Role, &str)>) -> Result<Self> {
        let t = PromptTemplate {
            name: name.to_string(),
            placeholders: placeholders.iter().map(|s| s.to_string()).collect(),
            messages: messages
                .into_iter()
                .map(|(role, text)| TemplateMessage { role, text: text.to_string() })
                .collect(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: PromptTemplate = toml::from_str(&text).map_err(|e| Error::Template {
            template: path.display().to_string(),
            message: e.to_string(),
        })?;
        t.validate()?;
        Ok(t)
    }

    pub fn used_placeholders(&self) -> BTreeSet<String> {
        self.messages
            .iter()
            .flat_map(|m| placeholder_re().captures_iter(&m.text).map(|c| c[1].to_string()))
            .collect()
    }

    /// Every placeholder used in a message must be declared.
    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(self.err("template has no messages"));
        }
        for used in self.used_placeholders() {
            if !self.placeholders.contains(&used) {
                return Err(self.err(format!("placeholder `{used}` is used but not declared")));
            }
        }
        Ok(())
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Template { template: self.name.clone(), message: message.into() }
    }

    /// Substitutes bindings verbatim. Missing bindings are errors; unused
    /// bindings produce warnings.
    pub fn render(&self, bindings: &BTreeMap<String, String>) -> Result<Rendered> {
        for name in &self.placeholders {
            if !bindings.contains_key(name) {
                return Err(self.err(format!("missing binding for placeholder `{name}`")));
            }
        }
        let mut warnings = Vec::new();
        for key in bindings.keys() {
            if !self.placeholders.contains(key) {
                let w = format!("template `{}`: binding `{key}` is not used", self.name);
                log::warn!("{w}");
                warnings.push(w);
            }
        }
        let messages = self
            .messages
            .iter()
            .map(|m| Message {
                role: m.role,
                content: placeholder_re()
                    .replace_all(&m.text, |c: &regex::Captures| bindings[&c[1]].clone())
                    .into_owned(),
            })
            .collect();
        Ok(Rendered { messages, warnings })
    }
}

pub fn bindings<const N: usize>(pairs: [(&str, &str); N]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tpl() -> PromptTemplate {
        PromptTemplate::new(
            "gen",
            &["abstract"],
            vec![
                (Role::System, "You are a reviewer."),
                (Role::User, "Abstract: {{abstract}}\nWrite 5 questions."),
            ],
        )
        .unwrap()
    }

    #[test]
    fn renders_binding_verbatim() {
        let abs = "Cover crops {reduce} N2O $emissions$ by 30%.";
        let r = tpl().render(&bindings([("abstract", abs)])).unwrap();
        assert_eq!(r.messages.len(), 2);
        assert_eq!(r.messages[0].role, Role::System);
        assert!(r.messages[1].content.contains(abs));
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn zero_placeholders_identity() {
        let t = PromptTemplate::new("plain", &[], vec![(Role::User, "Hello {not a placeholder}")]).unwrap();
        let r = t.render(&BTreeMap::new()).unwrap();
        assert_eq!(r.messages, vec![Message::user("Hello {not a placeholder}")]);
    }

    #[test]
    fn extra_binding_warns() {
        let r = tpl()
            .render(&bindings([("abstract", "a"), ("title", "t")]))
            .unwrap();
        assert_eq!(r.warnings.len(), 1);
        assert!(r.warnings[0].contains("title"));
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let err = tpl().render(&BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("abstract"), "{err}");
    }

    #[test]
    fn undeclared_placeholder_rejected() {
        assert!(PromptTemplate::new("bad", &[], vec![(Role::User, "{{x}}")]).is_err());
    }
}
