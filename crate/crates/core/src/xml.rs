//! Small helpers over roxmltree that attach line numbers to errors.

use roxmltree::{Document, Node};
use std::str::FromStr;
use thiserror::Error;

#[derive(Clone, Debug, PartialEq, Eq, Error)]
pub enum XmlError {
    #[error("malformed XML at line {line}: {message}")]
    Malformed { line: u32, message: String },
    #[error("line {line}: <{element}> is missing attribute {attr:?}")]
    MissingAttribute { line: u32, element: String, attr: String },
    #[error("line {line}: attribute {attr}={value:?} is not {expected}")]
    BadValue { line: u32, attr: String, value: String, expected: String },
    #[error("line {line}: unexpected element <{name}>")]
    UnknownElement { line: u32, name: String },
    #[error("line {line}: unexpected attribute {attr:?} on <{element}>")]
    UnknownAttribute { line: u32, element: String, attr: String },
}

pub fn parse_document(text: &str) -> Result<Document<'_>, XmlError> {
    Document::parse(text).map_err(|e| XmlError::Malformed { line: e.pos().row, message: e.to_string() })
}

/// A node whose errors report its line.
#[derive(Clone, Copy)]
pub struct Located<'a, 'input> {
    pub node: Node<'a, 'input>,
}

impl<'a, 'input> Located<'a, 'input> {
    pub fn new(node: Node<'a, 'input>) -> Self {
        Self { node }
    }

    pub fn line(&self) -> u32 {
        self.node.document().text_pos_at(self.node.range().start).row
    }

    pub fn name(&self) -> &'a str {
        self.node.tag_name().name()
    }
}

pub fn expect_name(at: Located, name: &str) -> Result<(), XmlError> {
    if at.name() == name {
        Ok(())
    } else {
        Err(unknown_element(at))
    }
}

pub fn unknown_element(at: Located) -> XmlError {
    XmlError::UnknownElement { line: at.line(), name: at.name().to_string() }
}

pub fn allow_attrs(at: Located, allowed: &[&str]) -> Result<(), XmlError> {
    for a in at.node.attributes() {
        if !allowed.contains(&a.name()) {
            return Err(XmlError::UnknownAttribute {
                line: at.line(),
                element: at.name().to_string(),
                attr: a.name().to_string(),
            });
        }
    }
    Ok(())
}

pub fn attr<'a>(at: Located<'a, '_>, name: &str) -> Result<&'a str, XmlError> {
    at.node.attribute(name).ok_or_else(|| XmlError::MissingAttribute {
        line: at.line(),
        element: at.name().to_string(),
        attr: name.to_string(),
    })
}

pub fn opt_attr<'a>(node: Node<'a, '_>, name: &str) -> Option<&'a str> {
    node.attribute(name)
}

fn bad(at: Located, attr: &str, value: &str, expected: &str) -> XmlError {
    XmlError::BadValue { line: at.line(), attr: attr.into(), value: value.into(), expected: expected.into() }
}

pub fn parse_u64(at: Located, name: &str, v: &str) -> Result<u64, XmlError> {
    v.parse().map_err(|_| bad(at, name, v, "a decimal integer"))
}

pub fn parse_int<T: FromStr>(at: Located, name: &str, v: &str) -> Result<T, XmlError> {
    v.parse().map_err(|_| bad(at, name, v, "an integer in range"))
}

/// Addresses are hexadecimal with a `0x` prefix.
pub fn hex_u64(at: Located, name: &str, v: &str) -> Result<u64, XmlError> {
    v.strip_prefix("0x")
        .and_then(|h| u64::from_str_radix(&h.replace('_', ""), 16).ok())
        .ok_or_else(|| bad(at, name, v, "a 0x-prefixed hexadecimal number"))
}

/// Sizes may be hexadecimal (`0x` prefix) or decimal.
pub fn size_u64(at: Located, name: &str, v: &str) -> Result<u64, XmlError> {
    if v.starts_with("0x") {
        hex_u64(at, name, v)
    } else {
        parse_u64(at, name, v)
    }
}

pub fn parse_bool(at: Located, name: &str, v: &str) -> Result<bool, XmlError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(at, name, v, "true or false")),
    }
}

pub fn parse_with<T: FromStr>(at: Located, name: &str, v: &str) -> Result<T, XmlError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e: T::Err| bad(at, name, v, &e.to_string()))
}

pub fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            c => out.push(c),
        }
    }
    out
}
