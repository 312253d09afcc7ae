use std::fmt;
use std::str::FromStr;

use super::{Doc, EntityLabel, EntitySpan, Token};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IobTag {
    O,
    B(EntityLabel),
    I(EntityLabel),
}

impl fmt::Display for IobTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            IobTag::O => f.write_str("O"),
            IobTag::B(l) => write!(f, "B-{l}"),
            IobTag::I(l) => write!(f, "I-{l}"),
        }
    }
}

impl FromStr for IobTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "O" {
            return Ok(IobTag::O);
        }
        match s.split_once('-') {
            Some(("B", l)) => Ok(IobTag::B(l.parse()?)),
            Some(("I", l)) => Ok(IobTag::I(l.parse()?)),
            _ => Err(Error::Config(format!("unknown IOB tag {s:?}"))),
        }
    }
}

/// Per-token IOB tags for a Doc's entities.
pub fn to_iob(doc: &Doc) -> Vec<IobTag> {
    let mut tags = vec![IobTag::O; doc.tokens.len()];
    for span in &doc.entities {
        for (k, tag) in tags
            .iter_mut()
            .enumerate()
            .take(span.token_end + 1)
            .skip(span.token_start)
        {
            *tag = if k == span.token_start {
                IobTag::B(span.label)
            } else {
                IobTag::I(span.label)
            };
        }
    }
    tags
}

/// Rebuilds entity spans from IOB tags. The returned Doc's text is laid out
/// from the token offsets, padding gaps with spaces.
pub fn from_iob(tokens: &[Token], tags: &[IobTag]) -> Result<Doc> {
    if tokens.len() != tags.len() {
        return Err(Error::Format {
            index: tokens.len().min(tags.len()),
            message: format!("{} tokens but {} tags", tokens.len(), tags.len()),
        });
    }
    let mut entities = Vec::new();
    let mut open: Option<EntitySpan> = None;
    for (i, tag) in tags.iter().enumerate() {
        match *tag {
            IobTag::O => entities.extend(open.take()),
            IobTag::B(label) => {
                entities.extend(open.take());
                open = Some(EntitySpan::new(label, i, i));
            }
            IobTag::I(label) => match open.as_mut() {
                Some(span) if span.label == label => span.token_end = i,
                _ => {
                    return Err(Error::Format {
                        index: i,
                        message: format!("{tag} does not continue an open {label} entity"),
                    })
                }
            },
        }
    }
    entities.extend(open);

    let mut text = String::new();
    let mut pos = 0;
    for tok in tokens {
        if tok.start < pos {
            return Err(Error::Format {
                index: tok.index,
                message: "tokens overlap".into(),
            });
        }
        text.extend(std::iter::repeat_n(' ', tok.start - pos));
        text.push_str(&tok.text);
        pos = tok.end;
    }
    Ok(Doc {
        text,
        tokens: tokens.to_vec(),
        entities,
        ..Default::default()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;
    use EntityLabel::*;

    fn doc(text: &str, spans: &[(EntityLabel, usize, usize)]) -> Doc {
        let mut d = Doc::from_text("t:0", text);
        d.entities = spans
            .iter()
            .map(|&(l, s, e)| EntitySpan::new(l, s, e))
            .collect();
        d
    }

    #[test]
    fn begin_inside_outside() {
        let d = doc("mean IOP fell", &[(Oc, 0, 1)]);
        assert_eq!(to_iob(&d), [IobTag::B(Oc), IobTag::I(Oc), IobTag::O]);
        let tags: Vec<String> = to_iob(&d).iter().map(ToString::to_string).collect();
        assert_eq!(tags, ["B-OC", "I-OC", "O"]);
    }

    #[test]
    fn no_spans_all_outside() {
        assert_eq!(to_iob(&doc("a b", &[])), [IobTag::O, IobTag::O]);
    }

    #[test]
    fn adjacent_spans_restart_with_begin() {
        let d = doc("5 6", &[(Meas, 0, 0), (Meas, 1, 1)]);
        assert_eq!(to_iob(&d), [IobTag::B(Meas), IobTag::B(Meas)]);
        assert_eq!(
            from_iob(&d.tokens, &to_iob(&d)).unwrap().entities,
            d.entities
        );
    }

    #[test]
    fn decodes_tags() {
        let toks = tokenize("mean IOP fell");
        let d = from_iob(&toks, &[IobTag::B(Oc), IobTag::I(Oc), IobTag::O]).unwrap();
        assert_eq!(d.entities, [EntitySpan::new(Oc, 0, 1)]);
        assert_eq!(d.text, "mean IOP fell");
        assert!(from_iob(&toks[..2], &[IobTag::O, IobTag::O])
            .unwrap()
            .entities
            .is_empty());
    }

    #[test]
    fn inside_after_outside_is_format_error() {
        let toks = tokenize("a 5");
        let err = from_iob(&toks, &[IobTag::O, IobTag::I(Meas)]).unwrap_err();
        assert!(matches!(err, Error::Format { index: 1, .. }), "{err}");
        let err = from_iob(&toks, &[IobTag::B(Oc), IobTag::I(Meas)]).unwrap_err();
        assert!(matches!(err, Error::Format { index: 1, .. }), "{err}");
    }

    #[test]
    fn tag_strings_parse() {
        assert_eq!("I-MEAS".parse::<IobTag>().unwrap(), IobTag::I(Meas));
        assert!("X-MEAS".parse::<IobTag>().is_err());
    }
}
