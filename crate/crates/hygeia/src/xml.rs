//! Minimal strict XML reader/writer for the bus wire formats.
//!
//! Only the subset the canonical grammars need is supported: elements,
//! double-quoted attributes, character data with the five standard
//! entities. Comments, CDATA, processing instructions (other than the
//! leading declaration) and numeric character references are rejected.

use std::fmt;

/// Position-carrying parse error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct XmlError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for XmlError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "xml error at byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for XmlError {}

/// Parsed element. `inner_span` is the byte range of the raw content
/// between the start and end tags, relative to the parsed input; it lets
/// callers recover embedded fragments byte-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Element {
    pub name: String,
    pub attrs: Vec<(String, String)>,
    pub children: Vec<Element>,
    /// Concatenated unescaped character data.
    pub text: String,
    pub inner_span: (usize, usize),
}

impl Element {
    pub fn attr(&self, name: &str) -> Option<&str> {
        self.attrs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_str())
    }

    pub fn child(&self, name: &str) -> Option<&Element> {
        self.children.iter().find(|c| c.name == name)
    }

    pub fn children_named<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a Element> {
        self.children.iter().filter(move |c| c.name == name)
    }

    /// Text content of a direct child, if present.
    pub fn child_text(&self, name: &str) -> Option<&str> {
        self.child(name).map(|c| c.text.as_str())
    }
}

/// Parses a whole document: optional XML declaration followed by exactly
/// one root element and nothing else but whitespace.
pub fn parse_document(input: &str) -> Result<Element, XmlError> {
    let mut p = Parser::new(input);
    p.skip_ws();
    if p.rest().starts_with("<?xml") {
        p.skip_declaration()?;
        p.skip_ws();
    }
    let root = p.parse_element()?;
    p.skip_ws();
    if !p.at_end() {
        return Err(p.err("trailing content after root element"));
    }
    Ok(root)
}

/// Parses exactly one element with no declaration and no surrounding
/// whitespace: the well-formedness check for payload fragments.
pub fn parse_fragment(input: &str) -> Result<Element, XmlError> {
    let mut p = Parser::new(input);
    let root = p.parse_element()?;
    if !p.at_end() {
        return Err(p.err("fragment must be exactly one element"));
    }
    Ok(root)
}

/// Escapes character data for element content.
pub fn escape_text(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            _ => out.push(c),
        }
    }
    out
}

/// Escapes character data for a double-quoted attribute value.
pub fn escape_attr(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

struct Parser<'a> {
    input: &'a str,
    pos: usize,
}

impl<'a> Parser<'a> {
    fn new(input: &'a str) -> Self {
        Parser { input, pos: 0 }
    }

    fn rest(&self) -> &'a str {
        &self.input[self.pos..]
    }

    fn at_end(&self) -> bool {
        self.pos >= self.input.len()
    }

    fn err(&self, message: &str) -> XmlError {
        XmlError {
            offset: self.pos,
            message: message.to_string(),
        }
    }

    fn peek(&self) -> Option<u8> {
        self.input.as_bytes().get(self.pos).copied()
    }

    fn bump(&mut self) -> Option<u8> {
        let b = self.peek()?;
        self.pos += 1;
        Some(b)
    }

    fn eat(&mut self, lit: &str) -> bool {
        if self.rest().starts_with(lit) {
            self.pos += lit.len();
            true
        } else {
            false
        }
    }

    fn skip_ws(&mut self) {
        while matches!(self.peek(), Some(b' ' | b'\t' | b'\r' | b'\n')) {
            self.pos += 1;
        }
    }

    fn skip_declaration(&mut self) -> Result<(), XmlError> {
        if !self.eat("<?xml") {
            return Err(self.err("expected xml declaration"));
        }
        match self.rest().find("?>") {
            Some(i) => {
                self.pos += i + 2;
                Ok(())
            }
            None => Err(self.err("unterminated xml declaration")),
        }
    }

    fn parse_name(&mut self) -> Result<String, XmlError> {
        let start = self.pos;
        match self.peek() {
            Some(b) if b.is_ascii_alphabetic() || b == b'_' => {
                self.pos += 1;
            }
            _ => return Err(self.err("expected name")),
        }
        while let Some(b) = self.peek() {
            if b.is_ascii_alphanumeric() || matches!(b, b'_' | b'-' | b'.' | b':') {
                self.pos += 1;
            } else {
                break;
            }
        }
        Ok(self.input[start..self.pos].to_string())
    }

    fn parse_entity(&mut self) -> Result<char, XmlError> {
        // caller consumed '&'
        for (name, ch) in [
            ("amp;", '&'),
            ("lt;", '<'),
            ("gt;", '>'),
            ("quot;", '"'),
            ("apos;", '\''),
        ] {
            if self.eat(name) {
                return Ok(ch);
            }
        }
        Err(self.err("unknown entity reference"))
    }

    fn parse_attr_value(&mut self) -> Result<String, XmlError> {
        if self.bump() != Some(b'"') {
            return Err(self.err("expected opening quote"));
        }
        let mut value = String::new();
        loop {
            match self.bump() {
                Some(b'"') => return Ok(value),
                Some(b'&') => value.push(self.parse_entity()?),
                Some(b'<') => return Err(self.err("'<' in attribute value")),
                Some(b) => {
                    // re-read full char for multi-byte sequences
                    self.pos -= 1;
                    let c = self.rest().chars().next().unwrap();
                    self.pos += c.len_utf8();
                    let _ = b;
                    value.push(c);
                }
                None => return Err(self.err("unterminated attribute value")),
            }
        }
    }

    fn parse_element(&mut self) -> Result<Element, XmlError> {
        if self.bump() != Some(b'<') {
            return Err(self.err("expected element"));
        }
        let name = self.parse_name()?;
        let mut attrs = Vec::new();
        loop {
            let before = self.pos;
            self.skip_ws();
            match self.peek() {
                Some(b'/') => {
                    self.pos += 1;
                    if self.bump() != Some(b'>') {
                        return Err(self.err("expected '>' after '/'"));
                    }
                    return Ok(Element {
                        name,
                        attrs,
                        children: Vec::new(),
                        text: String::new(),
                        inner_span: (self.pos, self.pos),
                    });
                }
                Some(b'>') => {
                    self.pos += 1;
                    break;
                }
                Some(_) if self.pos > before => {
                    let attr_name = self.parse_name()?;
                    if self.bump() != Some(b'=') {
                        return Err(self.err("expected '=' in attribute"));
                    }
                    let value = self.parse_attr_value()?;
                    if attrs.iter().any(|(n, _)| *n == attr_name) {
                        return Err(self.err("duplicate attribute"));
                    }
                    attrs.push((attr_name, value));
                }
                _ => return Err(self.err("malformed start tag")),
            }
        }
        let inner_start = self.pos;
        let mut children = Vec::new();
        let mut text = String::new();
        loop {
            match self.peek() {
                None => return Err(self.err("unterminated element")),
                Some(b'<') => {
                    if self.rest().starts_with("</") {
                        let inner_end = self.pos;
                        self.pos += 2;
                        let close = self.parse_name()?;
                        if close != name {
                            return Err(self.err("mismatched closing tag"));
                        }
                        if self.bump() != Some(b'>') {
                            return Err(self.err("expected '>' in closing tag"));
                        }
                        return Ok(Element {
                            name,
                            attrs,
                            children,
                            text,
                            inner_span: (inner_start, inner_end),
                        });
                    }
                    if self.rest().starts_with("<!") || self.rest().starts_with("<?") {
                        return Err(self.err("comments, CDATA and PIs are not accepted"));
                    }
                    children.push(self.parse_element()?);
                }
                Some(b'&') => {
                    self.pos += 1;
                    text.push(self.parse_entity()?);
                }
                Some(_) => {
                    let c = self.rest().chars().next().unwrap();
                    self.pos += c.len_utf8();
                    text.push(c);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_nested_elements() {
        let e = parse_document(r#"<?xml version="1.0" encoding="UTF-8"?><a x="1"><b>hi</b><c/></a>"#)
            .unwrap();
        assert_eq!(e.name, "a");
        assert_eq!(e.attr("x"), Some("1"));
        assert_eq!(e.children.len(), 2);
        assert_eq!(e.child_text("b"), Some("hi"));
    }

    #[test]
    fn inner_span_recovers_raw_content() {
        let doc = "<a><b>x &amp; y</b></a>";
        let e = parse_fragment(doc).unwrap();
        let (s, t) = e.inner_span;
        assert_eq!(&doc[s..t], "<b>x &amp; y</b>");
        assert_eq!(e.children[0].text, "x & y");
    }

    #[test]
    fn rejects_mismatched_tags() {
        assert!(parse_fragment("<a><b></a></b>").is_err());
        assert!(parse_fragment("<a><b>").is_err());
        assert!(parse_fragment("<a/><b/>").is_err());
    }

    #[test]
    fn rejects_unknown_entities_and_cdata() {
        assert!(parse_fragment("<a>&#65;</a>").is_err());
        assert!(parse_fragment("<a><![CDATA[x]]></a>").is_err());
        assert!(parse_fragment("<a><!-- c --></a>").is_err());
    }

    #[test]
    fn escape_round_trip() {
        let raw = r#"5 < 6 & "q" > 'p'"#;
        let doc = format!("<a>{}</a>", escape_text(raw));
        let e = parse_fragment(&doc).unwrap();
        assert_eq!(e.text, raw);
    }
}
