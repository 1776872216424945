//! Layer-string architecture descriptions.
//!
//! Convolutions are written `K{kernel}S{stride}C{channels}[D{dilation}]`,
//! optionally followed by a tap label such as `[P1]`. Structural tokens are
//! `downsample(2x)`, `upsample(2x)`, `concat`, `clip`, a bare tap `[P3]`,
//! `ACM` and `ATM`. Tokens are separated by ` - `.

use std::fmt;
use std::str::FromStr;

use crate::error::{CraError, Result};

pub const COARSE: &str = "downsample(2x) - K5S2C32 - K3S1C32 - K3S2C64 - K3S1C64 - K3S1C64 - K3S1C64 - \
K3S1C64 - K3S1C64 - K3S1C64 - K3S1C64D2 - K3S1C64D2 - K3S1C64D2 - K3S1C64D2 - K3S1C64D2 - K3S1C64D4 - \
K3S1C64D4 - K3S1C64D4 - K3S1C64D4 - K3S1C64D8 - K3S1C64D8 - K3S1C64 - K3S1C64 - K3S1C64 - upsample(2x) - \
K3S1C32 - upsample(2x) - K3S1C3 - clip - upsample(2x)";

pub const REFINE: &str = "K5S2C32 - K3S1C32[P1] - K3S2C64 - K3S1C64[P2] - K3S2C128 - K3S1C128 - K3S1C128 - \
K3S1C128D2 - K3S1C128D4 - K3S1C128D8 - K3S1C128D16[P3] - concat - K3S1C128 - upsample(2x) - K3S1C64 - \
K3S1C64 - concat - upsample(2x) - K3S1C32 - K3S1C32 - concat - upsample(2x) - K3S1C3 - clip";

pub const ATTENTION_BRANCH: &str = "[P3] - downsample(2x) - [P] - ACM - ATM";

pub const TRANSFER_BRANCHES: [&str; 3] = [
    "[P3] - ATM - K3S1C128 - concat",
    "[P2] - ATM - K3S1C64 - K3S1C64D2 - concat",
    "[P1] - ATM - K3S1C32 - K3S1C32D2 - concat",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvToken {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub dilation: usize,
    pub tap: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Conv(ConvToken),
    Downsample,
    Upsample,
    Concat,
    Clip,
    Tap(String),
    Acm,
    Atm,
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Layer::Conv(c) => {
                write!(f, "K{}S{}C{}", c.kernel, c.stride, c.channels)?;
                if c.dilation != 1 {
                    write!(f, "D{}", c.dilation)?;
                }
                if let Some(t) = &c.tap {
                    write!(f, "[{t}]")?;
                }
                Ok(())
            }
            Layer::Downsample => f.write_str("downsample(2x)"),
            Layer::Upsample => f.write_str("upsample(2x)"),
            Layer::Concat => f.write_str("concat"),
            Layer::Clip => f.write_str("clip"),
            Layer::Tap(t) => write!(f, "[{t}]"),
            Layer::Acm => f.write_str("ACM"),
            Layer::Atm => f.write_str("ATM"),
        }
    }
}

/// Ordered layer list of one chain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchSpec {
    pub layers: Vec<Layer>,
}

impl fmt::Display for ArchSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                f.write_str(" - ")?;
            }
            write!(f, "{l}")?;
        }
        Ok(())
    }
}

impl FromStr for ArchSpec {
    type Err = CraError;

    fn from_str(s: &str) -> Result<Self> {
        parse_arch(s)
    }
}

/// `[P^{l=1}]`, `[$P^{l=1}$]` and `[P1]` all name tap `P1`.
fn tap_name(raw: &str) -> Result<String> {
    let name: String = raw
        .replace("l=", "")
        .chars()
        .filter(|c| !matches!(c, '$' | '^' | '{' | '}' | ' '))
        .collect();
    if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric()) {
        return Err(CraError::Arch(format!("bad tap label `[{raw}]`")));
    }
    Ok(name)
}

fn split_tap(tok: &str) -> Result<(&str, Option<String>)> {
    match tok.find('[') {
        None => Ok((tok, None)),
        Some(i) => {
            let rest = &tok[i + 1..];
            let end = rest
                .rfind(']')
                .filter(|&e| e + 1 == rest.len())
                .ok_or_else(|| CraError::Arch(format!("unterminated tap in `{tok}`")))?;
            Ok((&tok[..i], Some(tap_name(&rest[..end])?)))
        }
    }
}

fn number(s: &str, tok: &str) -> Result<(usize, usize)> {
    let digits = s.bytes().take_while(u8::is_ascii_digit).count();
    if digits == 0 {
        return Err(CraError::Arch(format!("expected a number in `{tok}`")));
    }
    let v: usize = s[..digits]
        .parse()
        .map_err(|_| CraError::Arch(format!("number out of range in `{tok}`")))?;
    if v == 0 {
        return Err(CraError::Arch(format!("zero field in `{tok}`")));
    }
    Ok((v, digits))
}

fn parse_conv(body: &str, tok: &str, tap: Option<String>) -> Result<Layer> {
    let mut fields = [0usize; 4];
    let mut rest = body;
    for (i, key) in ['K', 'S', 'C', 'D'].into_iter().enumerate() {
        match rest.strip_prefix(key) {
            Some(r) => {
                let (v, n) = number(r, tok)?;
                fields[i] = v;
                rest = &r[n..];
            }
            None if key == 'D' => fields[i] = 1,
            None => return Err(CraError::Arch(format!("unknown token `{tok}`"))),
        }
    }
    if !rest.is_empty() {
        return Err(CraError::Arch(format!("unknown token `{tok}`")));
    }
    Ok(Layer::Conv(ConvToken {
        kernel: fields[0],
        stride: fields[1],
        channels: fields[2],
        dilation: fields[3],
        tap,
    }))
}

fn parse_token(tok: &str) -> Result<Layer> {
    let compact: String = tok.chars().filter(|c| !c.is_whitespace()).collect();
    let compact = compact.replace('×', "x").replace("$\\times$", "x");
    if let Some(inner) = compact.strip_prefix('[') {
        let inner = inner
            .strip_suffix(']')
            .ok_or_else(|| CraError::Arch(format!("unterminated tap `{tok}`")))?;
        return Ok(Layer::Tap(tap_name(inner)?));
    }
    let (body, tap) = split_tap(&compact)?;
    let layer = match body.to_ascii_lowercase().as_str() {
        "downsample(2x)" => Layer::Downsample,
        "upsample(2x)" => Layer::Upsample,
        "concat" => Layer::Concat,
        "clip" => Layer::Clip,
        "acm" => Layer::Acm,
        "atm" => Layer::Atm,
        _ if body.starts_with('K') => return parse_conv(body, tok, tap),
        _ => return Err(CraError::Arch(format!("unknown token `{tok}`"))),
    };
    if tap.is_some() {
        return Err(CraError::Arch(format!(
            "only convolutions can carry a tap: `{tok}`"
        )));
    }
    Ok(layer)
}

/// Parses one chain. Tap names must be unique, and a chain cannot begin
/// with `concat` since there would be nothing to join.
pub fn parse_arch(s: &str) -> Result<ArchSpec> {
    if s.trim().is_empty() {
        return Err(CraError::Arch("empty architecture string".into()));
    }
    let layers = s
        .split(" - ")
        .map(str::trim)
        .map(|t| {
            if t.is_empty() {
                Err(CraError::Arch("empty token".into()))
            } else {
                parse_token(t)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    if layers.first() == Some(&Layer::Concat) {
        return Err(CraError::Arch(
            "dangling concat at the start of the chain".into(),
        ));
    }
    let mut seen = Vec::new();
    for l in &layers {
        let tap = match l {
            Layer::Conv(ConvToken { tap: Some(t), .. }) => t,
            _ => continue,
        };
        if seen.contains(&tap) {
            return Err(CraError::Arch(format!("duplicate tap `{tap}`")));
        }
        seen.push(tap);
    }
    Ok(ArchSpec { layers })
}

impl ArchSpec {
    pub fn convs(&self) -> impl Iterator<Item = &ConvToken> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            _ => None,
        })
    }

    /// Tap labels attached to convolutions, in order.
    pub fn taps(&self) -> Vec<&str> {
        self.convs().filter_map(|c| c.tap.as_deref()).collect()
    }

    /// Tap a branch starts from.
    pub fn source_tap(&self) -> Option<&str> {
        match self.layers.first() {
            Some(Layer::Tap(t)) => Some(t),
            _ => None,
        }
    }

    pub fn concat_count(&self) -> usize {
        self.layers.iter().filter(|l| **l == Layer::Concat).count()
    }

    /// Receptive field and input-pixel spacing after `layers[..end]`, in
    /// units of the chain input. Resampling counts as a 2x2 kernel with
    /// stride 2 (down) or a spacing halving (up).
    pub fn receptive_field(&self, start: usize, end: usize) -> (f64, f64) {
        let mut rf = 1.0f64;
        let mut jump = 1.0f64;
        for l in &self.layers[start..end] {
            match l {
                Layer::Conv(c) => {
                    rf += ((c.kernel - 1) * c.dilation) as f64 * jump;
                    jump *= c.stride as f64;
                }
                Layer::Downsample => {
                    rf += jump;
                    jump *= 2.0;
                }
                Layer::Upsample => jump /= 2.0,
                _ => {}
            }
        }
        (rf, jump)
    }
}

/// Checks that every concat of `main` is fed by exactly one branch that
/// starts from a tap of `main` and ends in `concat`.
pub fn validate_branches(main: &ArchSpec, branches: &[ArchSpec]) -> Result<()> {
    let taps = main.taps();
    for b in branches {
        let src = b
            .source_tap()
            .ok_or_else(|| CraError::Arch(format!("branch `{b}` does not start from a tap")))?;
        if !taps.contains(&src) {
            return Err(CraError::Arch(format!("branch reads unknown tap `{src}`")));
        }
        if b.layers.last() != Some(&Layer::Concat) || b.concat_count() != 1 {
            return Err(CraError::Arch(format!(
                "branch `{b}` must end in a single concat"
            )));
        }
    }
    let need = main.concat_count();
    if need != branches.len() {
        return Err(CraError::Arch(format!(
            "dangling concat: {need} concat layers but {} producing branches",
            branches.len()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(s: &str) -> ConvToken {
        match parse_arch(s).unwrap().layers.remove(0) {
            Layer::Conv(c) => c,
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn conv_tokens() {
        let c = conv("K5S2C32");
        assert_eq!((c.kernel, c.stride, c.channels, c.dilation), (5, 2, 32, 1));
        assert_eq!(conv("K3S1C64D8").dilation, 8);
        assert_eq!(conv("K3S1C32[P^{l=1}]").tap.as_deref(), Some("P1"));
    }

    #[test]
    fn empty_and_unknown_are_rejected() {
        assert!(matches!(parse_arch(""), Err(CraError::Arch(_))));
        assert!(matches!(
            parse_arch("K3S1C32 - pool"),
            Err(CraError::Arch(_))
        ));
        assert!(matches!(parse_arch("K3S1"), Err(CraError::Arch(_))));
        assert!(matches!(parse_arch("K3S0C4"), Err(CraError::Arch(_))));
        assert!(matches!(
            parse_arch("concat - K3S1C4"),
            Err(CraError::Arch(_))
        ));
        assert!(matches!(
            parse_arch("K3S1C4[P1] - K3S1C4[P1]"),
            Err(CraError::Arch(_))
        ));
    }

    #[test]
    fn canonical_round_trip() {
        for s in [COARSE, REFINE, ATTENTION_BRANCH]
            .into_iter()
            .chain(TRANSFER_BRANCHES)
        {
            let spec = parse_arch(s).unwrap();
            assert_eq!(spec.to_string(), s);
            assert_eq!(parse_arch(&spec.to_string()).unwrap(), spec);
        }
    }

    #[test]
    fn typeset_spelling_is_accepted() {
        let a = parse_arch("downsample (2$\\times$) - K3S1C32[$P^{l=1}$] - upsample(2×)").unwrap();
        assert_eq!(a.to_string(), "downsample(2x) - K3S1C32[P1] - upsample(2x)");
    }

    #[test]
    fn layer_counts() {
        let c = parse_arch(COARSE).unwrap();
        assert_eq!(c.convs().count(), 25);
        assert_eq!(c.convs().filter(|c| c.dilation == 2).count(), 5);
        let r = parse_arch(REFINE).unwrap();
        assert_eq!(r.taps(), ["P1", "P2", "P3"]);
        assert_eq!(r.concat_count(), 3);
    }

    #[test]
    fn branches_validate() {
        let main = parse_arch(REFINE).unwrap();
        let branches: Vec<_> = TRANSFER_BRANCHES
            .iter()
            .map(|s| parse_arch(s).unwrap())
            .collect();
        validate_branches(&main, &branches).unwrap();
        assert!(validate_branches(&main, &branches[..2]).is_err());
        let bad = parse_arch("[P9] - ATM - concat").unwrap();
        assert!(validate_branches(&main, &[bad]).is_err());
    }

    #[test]
    fn coarse_dilated_block_receptive_field() {
        // measured on the map right after the first strided convolution
        let c = parse_arch(COARSE).unwrap();
        let start = 2;
        let end = c
            .layers
            .iter()
            .rposition(|l| matches!(l, Layer::Conv(ConvToken { dilation: 8, .. })))
            .unwrap()
            + 1;
        let (rf, _) = c.receptive_field(start, end);
        // 3x3 and 3x3/2 at the 128 map, then 6 plain, 5 D2, 4 D4, 2 D8 layers
        // at spacing 2: 1 + 2 + 2 + 2 * (6 * 2 + 5 * 4 + 4 * 8 + 2 * 16)
        assert_eq!(rf, 197.0);
        assert!(rf > 61.0);
    }
}
