use super::Token;

/// Splits a sentence into word, number and punctuation tokens with char offsets.
///
/// Alphanumeric runs form one token; `.` and `,` stay inside a token only
/// when both neighbours are digits, so `18.3` and `1,000` survive intact.
/// Every other non-space character is its own token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_alphanumeric() {
            i += 1;
            while i < chars.len() {
                let c = chars[i];
                if c.is_alphanumeric() {
                    i += 1;
                } else if (c == '.' || c == ',')
                    && chars[i - 1].is_ascii_digit()
                    && chars.get(i + 1).is_some_and(|n| n.is_ascii_digit())
                {
                    i += 2;
                } else {
                    break;
                }
            }
        } else {
            i += 1;
        }
        tokens.push(Token {
            text: chars[start..i].iter().collect(),
            start,
            end: i,
            index: tokens.len(),
        });
    }
    tokens
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        tokenize(s).into_iter().map(|t| t.text).collect()
    }

    #[test]
    fn keeps_decimals_and_thousands() {
        assert_eq!(
            texts("IOP fell to 18.3 mm Hg (n=1,024)."),
            ["IOP", "fell", "to", "18.3", "mm", "Hg", "(", "n", "=", "1,024", ")", "."]
        );
    }

    #[test]
    fn splits_percent_and_hyphen() {
        assert_eq!(texts("39.3% anti-VEGF"), ["39.3", "%", "anti", "-", "VEGF"]);
    }

    #[test]
    fn trailing_period_after_number_is_split() {
        assert_eq!(texts("N=52."), ["N", "=", "52", "."]);
    }

    #[test]
    fn offsets_are_char_based() {
        let toks = tokenize("≥ 5 mg");
        assert_eq!((toks[1].start, toks[1].end), (2, 3));
        assert_eq!((toks[2].start, toks[2].end), (4, 6));
    }
}
