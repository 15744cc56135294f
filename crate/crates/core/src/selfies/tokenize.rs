use crate::error::{Error, Result};

/// Splits a SELFIES string into bracketed symbols.
///
/// Fails with the byte offset of the first character outside a bracket, of a
/// nested `[`, or of an unclosed bracket.
pub fn tokenize(s: &str) -> Result<Vec<&str>> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    for (i, c) in s.char_indices() {
        match (c, open) {
            ('[', None) => open = Some(i),
            ('[', Some(_)) => {
                return Err(Error::Parse {
                    offset: i,
                    message: "nested '[' inside a symbol".into(),
                })
            }
            (']', Some(start)) => {
                out.push(&s[start..=i]);
                open = None;
            }
            (']', None) => {
                return Err(Error::Parse {
                    offset: i,
                    message: "']' without matching '['".into(),
                })
            }
            (_, Some(_)) => {}
            (c, None) => {
                return Err(Error::Parse {
                    offset: i,
                    message: format!("character '{c}' outside brackets"),
                })
            }
        }
    }
    if let Some(start) = open {
        return Err(Error::Parse {
            offset: start,
            message: "unclosed '['".into(),
        });
    }
    Ok(out)
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(AsRef::as_ref).collect()
}
