//! Text encodings shared by every on-disk format: floats are written with 17
//! significant digits (`%.17g`), which round-trips any `f64` bit for bit.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::geometry::{GeometryError, Point3, Pose};

/// On-disk pose: row-major world → camera rotation and translation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let t = p.translation();
        Self {
            rotation: p.rotation_row_major(),
            translation: [t.x, t.y, t.z],
        }
    }
}

impl TryFrom<PoseRecord> for Pose {
    type Error = GeometryError;

    fn try_from(r: PoseRecord) -> Result<Self, Self::Error> {
        Pose::from_row_major(&r.rotation, &r.translation)
    }
}

pub fn point_array(p: &Point3) -> [f64; 3] {
    [p.x, p.y, p.z]
}

/// `%.17g` formatting of a finite float.
pub fn fmt_f64(x: f64) -> String {
    let mut out = String::new();
    push_f64(&mut out, x);
    out
}

pub fn push_f64(out: &mut String, x: f64) {
    const PRECISION: i32 = 17;
    if x == 0.0 {
        out.push_str(if x.is_sign_negative() { "-0" } else { "0" });
        return;
    }
    if !x.is_finite() {
        // Not representable in JSON; callers validate before writing.
        let _ = write!(out, "{x}");
        return;
    }
    let sci = format!("{:.*e}", (PRECISION - 1) as usize, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent");
    let exp: i32 = exp.parse().expect("exponent digits");
    if !(-4..PRECISION).contains(&exp) {
        out.push_str(trim_fraction(mantissa));
        let _ = write!(out, "e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs());
    } else {
        let decimals = (PRECISION - 1 - exp) as usize;
        let fixed = format!("{:.*}", decimals, x);
        out.push_str(trim_fraction(&fixed));
    }
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// serde_json formatter that emits floats as `%.17g`.
#[derive(Debug, Default, Clone, Copy)]
pub struct SigDigits;

impl serde_json::ser::Formatter for SigDigits {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, value as f64)
    }
}

/// One compact JSON document with 17-digit floats.
pub fn to_json_line<T: Serialize>(value: &T) -> serde_json::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SigDigits);
    value.serialize(&mut ser)?;
    Ok(String::from_utf8(buf).expect("serde_json emits utf-8"))
}

/// Pretty-printed JSON with 17-digit floats.
pub fn to_json_pretty<T: Serialize>(value: &T) -> serde_json::Result<String> {
    // PrettyFormatter cannot be combined with a custom float writer, so
    // re-indent the compact form through serde_json::Value with raw numbers.
    let compact = to_json_line(value)?;
    let v: serde_json::Value = serde_json::from_str(&compact)?;
    let mut out = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut out, PrettySig::default());
    v.serialize(&mut ser)?;
    Ok(String::from_utf8(out).expect("utf-8"))
}

#[derive(Default)]
struct PrettySig<'a> {
    inner: serde_json::ser::PrettyFormatter<'a>,
}

macro_rules! delegate {
    ($($name:ident($($arg:ident: $ty:ty),*)),* $(,)?) => {
        $(fn $name<W: ?Sized + Write>(&mut self, writer: &mut W $(, $arg: $ty)*) -> io::Result<()> {
            self.inner.$name(writer $(, $arg)*)
        })*
    };
}

impl serde_json::ser::Formatter for PrettySig<'_> {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(fmt_f64(value).as_bytes())
    }

    delegate!(
        begin_array(),
        end_array(),
        begin_array_value(first: bool),
        end_array_value(),
        begin_object(),
        end_object(),
        begin_object_key(first: bool),
        end_object_key(),
        begin_object_value(),
        end_object_value(),
    );
}

pub fn write_jsonl<W: Write, T: Serialize>(mut w: W, records: impl IntoIterator<Item = T>) -> io::Result<()> {
    for rec in records {
        let line = to_json_line(&rec).map_err(io::Error::other)?;
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead, T: DeserializeOwned>(r: R) -> io::Result<Vec<T>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| {
            io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", lineno + 1))
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn matches_printf_g17() {
        assert_eq!(fmt_f64(1.0), "1");
        assert_eq!(fmt_f64(0.1), "0.10000000000000001");
        assert_eq!(fmt_f64(-2.5), "-2.5");
        assert_eq!(fmt_f64(1e-5), "1.0000000000000001e-05");
        assert_eq!(fmt_f64(123456789.0), "123456789");
        assert_eq!(fmt_f64(1e20), "1e+20");
        assert_eq!(fmt_f64(0.0), "0");
    }

    #[test]
    fn json_uses_sig_digits() {
        let s = to_json_line(&serde_json::json!({"a": 0.1, "b": [1.0, 2]})).unwrap();
        assert_eq!(s, r#"{"a":0.10000000000000001,"b":[1,2]}"#);
    }

    proptest! {
        #[test]
        fn bit_exact_round_trip(x in any::<f64>().prop_filter("finite", |x| x.is_finite())) {
            let back: f64 = fmt_f64(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
            let json = to_json_line(&vec![x]).unwrap();
            let back: Vec<f64> = serde_json::from_str(&json).unwrap();
            prop_assert_eq!(back[0].to_bits(), x.to_bits());
        }
    }
}
