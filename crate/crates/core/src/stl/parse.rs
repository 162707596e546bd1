//! Text syntax for formulas.
//!
//! ```text
//! formula := conj ( '|' conj )*
//! conj    := unary ( '&' unary )*
//! unary   := '!' unary | 'G' '(' formula ')' | 'F' '(' formula ')'
//!          | '(' formula ')' | atom
//! atom    := IDENT ( '>=' | '<=' ) NUMBER
//! ```
//!
//! `G` and `F` are operators only when directly followed by `(`; otherwise
//! they lex as ordinary signal names.

use super::{Comparator, Formula};
use crate::error::{Result, SgdaError};

pub fn parse(text: &str) -> Result<Formula> {
    let mut p = Parser { src: text.as_bytes(), pos: 0 };
    let f = p.disjunction()?;
    p.skip_ws();
    if p.pos != p.src.len() {
        return Err(p.error("trailing input"));
    }
    Ok(f)
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn error(&self, message: &str) -> SgdaError {
        SgdaError::Parse { offset: self.pos, message: message.to_string() }
    }

    fn skip_ws(&mut self) {
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.src.get(self.pos).copied()
    }

    fn eat(&mut self, c: u8) -> bool {
        if self.peek() == Some(c) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect(&mut self, c: u8) -> Result<()> {
        if self.eat(c) {
            Ok(())
        } else {
            Err(self.error(&format!("expected `{}`", c as char)))
        }
    }

    fn disjunction(&mut self) -> Result<Formula> {
        let mut parts = vec![self.conjunction()?];
        while self.eat(b'|') {
            parts.push(self.conjunction()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::Or(parts) })
    }

    fn conjunction(&mut self) -> Result<Formula> {
        let mut parts = vec![self.unary()?];
        while self.eat(b'&') {
            parts.push(self.unary()?);
        }
        Ok(if parts.len() == 1 { parts.pop().unwrap() } else { Formula::And(parts) })
    }

    fn unary(&mut self) -> Result<Formula> {
        match self.peek() {
            Some(b'!') => {
                self.pos += 1;
                Ok(Formula::Not(Box::new(self.unary()?)))
            }
            Some(b'(') => {
                self.pos += 1;
                let f = self.disjunction()?;
                self.expect(b')')?;
                Ok(f)
            }
            Some(c) if c.is_ascii_alphabetic() || c == b'_' => {
                let ident = self.ident();
                let save = self.pos;
                if (ident == "G" || ident == "F") && self.eat(b'(') {
                    let inner = self.disjunction()?;
                    self.expect(b')')?;
                    return Ok(if ident == "G" {
                        Formula::Globally(Box::new(inner))
                    } else {
                        Formula::Eventually(Box::new(inner))
                    });
                }
                self.pos = save;
                let cmp = self.comparator()?;
                let threshold = self.number()?;
                Ok(Formula::Atom { signal: ident, cmp, threshold })
            }
            Some(_) => Err(self.error("unexpected character")),
            None => Err(self.error("unexpected end of input")),
        }
    }

    fn ident(&mut self) -> String {
        let start = self.pos;
        while self.pos < self.src.len() && (self.src[self.pos].is_ascii_alphanumeric() || self.src[self.pos] == b'_') {
            self.pos += 1;
        }
        String::from_utf8_lossy(&self.src[start..self.pos]).into_owned()
    }

    fn comparator(&mut self) -> Result<Comparator> {
        self.skip_ws();
        let rest = &self.src[self.pos..];
        let cmp = if rest.starts_with(b">=") {
            Comparator::Ge
        } else if rest.starts_with(b"<=") {
            Comparator::Le
        } else {
            return Err(self.error("expected `>=` or `<=`"));
        };
        self.pos += 2;
        Ok(cmp)
    }

    fn number(&mut self) -> Result<f64> {
        self.skip_ws();
        let start = self.pos;
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let sign_ok = (c == b'-' || c == b'+')
                && (self.pos == start || matches!(self.src[self.pos - 1], b'e' | b'E'));
            if c.is_ascii_digit() || c == b'.' || c == b'e' || c == b'E' || sign_ok {
                self.pos += 1;
            } else {
                break;
            }
        }
        let lexeme = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        lexeme.parse::<f64>().map_err(|_| {
            self.pos = start;
            self.error("expected a number")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_property_syntax() {
        let f = parse("G(ego_ado_distance >= 0)").unwrap();
        assert_eq!(f, Formula::ge("ego_ado_distance", 0.0).always());
        let g = parse("G(brake_intensity <= 0.4)").unwrap();
        assert_eq!(g, Formula::le("brake_intensity", 0.4).always());
    }

    #[test]
    fn precedence_not_and_or() {
        let f = parse("!a >= 1 & b <= 2 | F(c >= -3e-1)").unwrap();
        let expected = Formula::Or(vec![
            Formula::And(vec![Formula::ge("a", 1.0).not(), Formula::le("b", 2.0)]),
            Formula::ge("c", -0.3).eventually(),
        ]);
        assert_eq!(f, expected);
    }

    #[test]
    fn g_without_paren_is_a_signal_name() {
        let f = parse("G >= 1").unwrap();
        assert_eq!(f, Formula::ge("G", 1.0));
        let f = parse("Gap <= 2").unwrap();
        assert_eq!(f, Formula::le("Gap", 2.0));
    }

    #[test]
    fn display_round_trips() {
        for text in [
            "G(ego_ado_distance >= 0)",
            "!(a >= 1 | b <= 2) & F(G(c >= 0.5))",
            "(a >= 1 & b >= 2) | !c <= -1",
            "G(!(a >= 1 & b >= 0))",
        ] {
            let f = parse(text).unwrap();
            let again = parse(&f.to_string()).unwrap();
            assert_eq!(f, again, "{text} -> {f}");
        }
    }

    #[test]
    fn reports_errors_with_offsets() {
        for bad in ["", "G(x >= 1", "x > 1", "x >= ", "x >= 1 )", "&x >= 1"] {
            assert!(matches!(parse(bad), Err(SgdaError::Parse { .. })), "{bad}");
        }
        match parse("x >= 1 )") {
            Err(SgdaError::Parse { offset, .. }) => assert_eq!(offset, 7),
            other => panic!("{other:?}"),
        }
    }
}
