//! Line-oriented `section.key = value` configuration text.
//!
//! `#` starts a comment, blank lines are ignored, arrays are comma-separated.
//! Config structs opt in with [`kv_section!`](crate::kv_section), which maps each
//! listed field to a key of the same name.

use std::fmt::Display;
use std::str::FromStr;

use crate::error::{EclfError, Result};

/// A value that can appear on the right of `=`.
pub trait ConfValue: Sized {
    fn parse_conf(text: &str) -> std::result::Result<Self, String>;
    fn render_conf(&self) -> String;
}

macro_rules! conf_via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfValue for $t {
            fn parse_conf(text: &str) -> std::result::Result<Self, String> {
                text.trim().parse::<$t>().map_err(|e| format!("cannot parse {text:?}: {e}"))
            }
            fn render_conf(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

conf_via_fromstr!(f64, u64, u32, usize, bool, String);

/// `auto` (or empty) stands for `None`.
impl<T: ConfValue> ConfValue for Option<T> {
    fn parse_conf(text: &str) -> std::result::Result<Self, String> {
        match text.trim() {
            "" | "auto" => Ok(None),
            t => T::parse_conf(t).map(Some),
        }
    }
    fn render_conf(&self) -> String {
        match self {
            None => "auto".into(),
            Some(v) => v.render_conf(),
        }
    }
}

impl<T: ConfValue> ConfValue for Vec<T> {
    fn parse_conf(text: &str) -> std::result::Result<Self, String> {
        if text.trim().is_empty() {
            return Ok(Vec::new());
        }
        text.split(',').map(|p| T::parse_conf(p.trim())).collect()
    }
    fn render_conf(&self) -> String {
        self.iter().map(|v| v.render_conf()).collect::<Vec<_>>().join(", ")
    }
}

/// Implements [`ConfValue`] for a type with `FromStr` + `Display`.
#[macro_export]
macro_rules! conf_value_via_str {
    ($($t:ty),*) => {$(
        impl $crate::textconf::ConfValue for $t {
            fn parse_conf(text: &str) -> ::std::result::Result<Self, String> {
                text.trim().parse::<$t>().map_err(|e| e.to_string())
            }
            fn render_conf(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

pub enum SetError {
    UnknownKey,
    BadValue(String),
}

/// A config struct addressable by key.
pub trait Section {
    fn set_value(&mut self, key: &str, value: &str) -> std::result::Result<(), SetError>;
    fn entries(&self) -> Vec<(&'static str, String)>;

    /// Applies `key = value`, reporting errors under `section.key`.
    fn apply(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match self.set_value(key, value) {
            Ok(()) => Ok(()),
            Err(SetError::UnknownKey) => Err(EclfError::config(format!("{section}.{key}"), "unknown key")),
            Err(SetError::BadValue(m)) => Err(EclfError::config(format!("{section}.{key}"), m)),
        }
    }
}

#[macro_export]
macro_rules! kv_section {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $crate::textconf::Section for $ty {
            fn set_value(&mut self, key: &str, value: &str) -> ::std::result::Result<(), $crate::textconf::SetError> {
                match key {
                    $(stringify!($field) => {
                        self.$field = $crate::textconf::ConfValue::parse_conf(value)
                            .map_err($crate::textconf::SetError::BadValue)?;
                        Ok(())
                    })*
                    _ => Err($crate::textconf::SetError::UnknownKey),
                }
            }
            fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($field), $crate::textconf::ConfValue::render_conf(&self.$field))),*]
            }
        }
    };
}

/// One `section.key = value` assignment with its source line.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub line: usize,
    pub section: String,
    pub key: String,
    pub value: String,
}

pub fn parse_assignments(text: &str) -> Result<Vec<Assignment>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (lhs, rhs) = line
            .split_once('=')
            .ok_or_else(|| EclfError::config(format!("line {}", i + 1), format!("expected `section.key = value`, got {raw:?}")))?;
        let lhs = lhs.trim();
        let (section, key) = lhs
            .split_once('.')
            .ok_or_else(|| EclfError::config(lhs, format!("line {}: key must be `section.key`", i + 1)))?;
        out.push(Assignment {
            line: i + 1,
            section: section.trim().to_string(),
            key: key.trim().to_string(),
            value: rhs.trim().to_string(),
        });
    }
    Ok(out)
}

pub fn render_section(section: &str, s: &dyn Section) -> String {
    s.entries().into_iter().map(|(k, v)| format!("{section}.{k} = {v}\n")).collect()
}

/// Helper for enums written as lowercase words.
pub fn parse_word<T: Copy>(text: &str, options: &[(&str, T)]) -> std::result::Result<T, String> {
    let t = text.trim().to_ascii_lowercase();
    options.iter().find(|(name, _)| *name == t).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        format!("expected one of {}, got {text:?}", names.join("|"))
    })
}

pub fn parse_display<T: FromStr>(text: &str) -> std::result::Result<T, String>
where
    T::Err: Display,
{
    text.trim().parse::<T>().map_err(|e| e.to_string())
}
