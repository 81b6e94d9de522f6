//! Line-oriented `key = value` text with `[section]` headers.
//!
//! `#` starts a comment. Blank lines are ignored. Keys before the first header
//! belong to a section with an empty name. Sections may repeat.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub line: usize,
    pub entries: Vec<Entry>,
}

impl Section {
    pub fn get(&self, key: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.key == key)
    }

    pub fn require(&self, key: &str) -> Result<&Entry> {
        self.get(key).ok_or_else(|| {
            Error::config(key, format!("missing in [{}] section at line {}", self.name, self.line))
        })
    }

    /// Rejects any key not in `allowed`.
    pub fn only(&self, allowed: &[&str]) -> Result<()> {
        match self.entries.iter().find(|e| !allowed.contains(&e.key.as_str())) {
            Some(e) => Err(Error::config(
                &e.key,
                format!("unknown key in [{}] at line {}", self.name, e.line),
            )),
            None => Ok(()),
        }
    }

    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.get(key).map(|e| e.parse()).transpose()
    }

    pub fn parsed_or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.parsed(key)?.unwrap_or(default))
    }

    pub fn required<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.require(key)?.parse()
    }
}

impl Entry {
    pub fn parse<T: std::str::FromStr>(&self) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.value
            .parse()
            .map_err(|e| Error::config(&self.key, format!("bad value {:?} at line {}: {e}", self.value, self.line)))
    }
}

pub fn parse(text: &str) -> Result<Vec<Section>> {
    let mut sections = vec![Section {
        name: String::new(),
        line: 0,
        entries: Vec::new(),
    }];
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| Error::config(format!("line {line}"), "unterminated section header"))?
                .trim();
            if name.is_empty() {
                return Err(Error::config(format!("line {line}"), "empty section name"));
            }
            sections.push(Section {
                name: name.to_string(),
                line,
                entries: Vec::new(),
            });
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::config(format!("line {line}"), format!("expected `key = value`, got {content:?}")))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::config(format!("line {line}"), "empty key"));
        }
        let section = sections.last_mut().expect("root section");
        if section.get(key).is_some() {
            return Err(Error::config(key, format!("duplicate key at line {line}")));
        }
        section.entries.push(Entry {
            key: key.to_string(),
            value: value.trim().to_string(),
            line,
        });
    }
    if sections[0].entries.is_empty() {
        sections.remove(0);
    }
    Ok(sections)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sections_and_comments() {
        let s = parse("a = 1 # note\n\n[x]\nb= two \n[x]\nb = 3\n").unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s[0].name, "");
        assert_eq!(s[1].get("b").unwrap().value, "two");
        assert_eq!(s[2].required::<u32>("b").unwrap(), 3);
    }

    #[test]
    fn errors_name_the_key() {
        let s = parse("[m]\nf2 = abc\n").unwrap();
        let err = s[0].required::<u32>("f2").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "f2"));
        let err = s[0].required::<u32>("f1").unwrap_err();
        assert!(matches!(err, Error::Config { ref key, .. } if key == "f1"));
        assert!(s[0].only(&["f1"]).is_err());
    }

    #[test]
    fn malformed_lines() {
        assert!(parse("[open\n").is_err());
        assert!(parse("novalue\n").is_err());
        assert!(parse("a = 1\na = 2\n").is_err());
    }
}
