//! JSON writing with full-precision floats.
//!
//! Every float that leaves this crate goes through `{:.16e}`: 17 significant
//! digits, enough to reproduce any f64 bit pattern on read-back. The default
//! serde_json formatter uses shortest-round-trip notation, which also
//! round-trips but produces layout that varies in width; fixed scientific
//! form keeps files diffable and the round-trip property obvious.

use serde::Serialize;
use serde_json::ser::Formatter;
use std::io;

/// serde_json formatter that writes every f64 as `{:.16e}`.
#[derive(Default)]
pub struct SciFormatter;

impl Formatter for SciFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        if !value.is_finite() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("non-finite float {value} has no JSON form"),
            ));
        }
        write!(writer, "{value:.16e}")
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.write_f64(writer, value as f64)
    }
}

/// Serializes `value` as a single JSON line (no trailing newline).
pub fn to_string<T: Serialize>(value: &T) -> crate::Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, SciFormatter);
    value
        .serialize(&mut ser)
        .map_err(|e| crate::Error::contract(format!("JSON encoding failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Serializes `value` as indented JSON.
pub fn to_string_pretty<T: Serialize>(value: &T) -> crate::Result<String> {
    let mut buf = Vec::new();
    let pretty = serde_json::ser::PrettyFormatter::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, PrettySci { pretty });
    value
        .serialize(&mut ser)
        .map_err(|e| crate::Error::contract(format!("JSON encoding failed: {e}")))?;
    Ok(String::from_utf8(buf).expect("serde_json writes UTF-8"))
}

/// Pretty layout with the same float policy.
pub struct PrettySci<'a> {
    pretty: serde_json::ser::PrettyFormatter<'a>,
}

impl Formatter for PrettySci<'_> {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        SciFormatter.write_f64(writer, value)
    }

    fn write_f32<W>(&mut self, writer: &mut W, value: f32) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        SciFormatter.write_f32(writer, value)
    }

    fn begin_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.begin_array(writer)
    }

    fn end_array<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.end_array(writer)
    }

    fn begin_array_value<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.begin_array_value(writer, first)
    }

    fn end_array_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.end_array_value(writer)
    }

    fn begin_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.begin_object(writer)
    }

    fn end_object<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.end_object(writer)
    }

    fn begin_object_key<W>(&mut self, writer: &mut W, first: bool) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.begin_object_key(writer, first)
    }

    fn end_object_key<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.end_object_key(writer)
    }

    fn begin_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.begin_object_value(writer)
    }

    fn end_object_value<W>(&mut self, writer: &mut W) -> io::Result<()>
    where
        W: ?Sized + io::Write,
    {
        self.pretty.end_object_value(writer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floats_round_trip_bit_for_bit() {
        let values = [
            0.1,
            -0.1,
            1.0 / 3.0,
            std::f64::consts::PI,
            1e-300,
            -1e300,
            f64::MIN_POSITIVE,
            0.0,
            -0.0,
            1.0,
        ];
        for v in values {
            let s = to_string(&v).unwrap();
            let back: f64 = serde_json::from_str(&s).unwrap();
            assert_eq!(back.to_bits(), v.to_bits(), "{v} -> {s} -> {back}");
        }
    }

    #[test]
    fn format_is_fixed_scientific() {
        assert_eq!(to_string(&1.0f64).unwrap(), "1.0000000000000000e0");
        assert_eq!(to_string(&0.5f64).unwrap(), "5.0000000000000000e-1");
    }

    #[test]
    fn non_finite_floats_never_produce_numbers() {
        // serde_json short-circuits non-finite values to null before the
        // formatter sees them; file formats that must stay loadable check
        // finiteness before serializing. Reading null back as f64 fails, so
        // a slipped-through NaN cannot silently round-trip either way.
        assert_eq!(to_string(&f64::NAN).unwrap(), "null");
        assert!(serde_json::from_str::<f64>("null").is_err());
        // Direct formatter calls do refuse.
        let mut buf = Vec::new();
        assert!(SciFormatter.write_f64(&mut buf, f64::NAN).is_err());
    }

    #[test]
    fn pretty_output_keeps_the_float_policy() {
        #[derive(serde::Serialize)]
        struct S {
            a: f64,
            b: Vec<f64>,
        }
        let s = to_string_pretty(&S {
            a: 0.5,
            b: vec![1.0, 2.0],
        })
        .unwrap();
        assert!(s.contains("5.0000000000000000e-1"));
        assert!(s.contains('\n'));
        let back: serde_json::Value = serde_json::from_str(&s).unwrap();
        assert_eq!(back["a"].as_f64().unwrap(), 0.5);
    }
}
