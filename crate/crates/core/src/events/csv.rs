//! Event CSV: header `t_us,x,y,p`, decimal integer rows, `p` in {-1, 1}.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Event, EventStream, Polarity};
use crate::error::{Error, Result};
use crate::image::write_atomic;

pub const CSV_HEADER: &str = "t_us,x,y,p";

pub fn write_event_csv(stream: &EventStream) -> String {
    let mut out = String::with_capacity(16 * (stream.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for e in stream.events() {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p.sign());
    }
    out
}

/// Parses an event CSV. The sensor size and time span are not part of the
/// file and come from the sequence manifest.
pub fn read_event_csv(
    text: &str,
    origin: &Path,
    width: u32,
    height: u32,
    t_begin: i64,
    t_end: i64,
) -> Result<EventStream> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        message,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == CSV_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(1, format!("expected header {CSV_HEADER:?}, found {h:?}")))
        }
        None => return Err(parse_err(1, "missing header".into())),
    }
    let mut events = Vec::new();
    let mut prev = t_begin;
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 fields, found {}", fields.len())));
        }
        let num = |i: usize, name: &str| -> Result<i64> {
            fields[i]
                .trim()
                .parse::<i64>()
                .map_err(|_| parse_err(line_no, format!("bad {name}: {:?}", fields[i])))
        };
        let t = num(0, "t_us")?;
        let x = num(1, "x")?;
        let y = num(2, "y")?;
        let p = num(3, "p")?;
        let p = Polarity::from_sign(p)
            .ok_or_else(|| parse_err(line_no, format!("polarity must be -1 or 1, found {p}")))?;
        if x < 0 || y < 0 || x >= width as i64 || y >= height as i64 {
            return Err(parse_err(
                line_no,
                format!("pixel ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        if t < prev {
            return Err(parse_err(line_no, format!("t_us {t} precedes {prev}")));
        }
        if t > t_end {
            return Err(parse_err(line_no, format!("t_us {t} after stream end {t_end}")));
        }
        prev = t;
        events.push(Event::new(t, x as u32, y as u32, p));
    }
    EventStream::new(events, width, height, t_begin, t_end)
}

pub fn save_event_stream(stream: &EventStream, path: &Path) -> Result<()> {
    write_atomic(path, write_event_csv(stream).as_bytes())
}

pub fn load_event_stream(
    path: &Path,
    width: u32,
    height: u32,
    t_begin: i64,
    t_end: i64,
) -> Result<EventStream> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    read_event_csv(&text, path, width, height, t_begin, t_end)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EventStream> {
        read_event_csv(text, Path::new("test.csv"), 8, 8, 0, 1000)
    }

    #[test]
    fn roundtrip_three_events() {
        let s = EventStream::new(
            vec![
                Event::new(1, 0, 0, Polarity::Positive),
                Event::new(1, 7, 3, Polarity::Negative),
                Event::new(999, 2, 7, Polarity::Positive),
            ],
            8,
            8,
            0,
            1000,
        )
        .unwrap();
        assert_eq!(parse(&write_event_csv(&s)).unwrap(), s);
    }

    #[test]
    fn header_only_is_empty_stream() {
        let s = parse("t_us,x,y,p\n").unwrap();
        assert_eq!(s.len(), 0);
    }

    #[test]
    fn rejects_bad_rows_with_line_numbers() {
        let err = parse("t_us,x,y,p\n1,0,0,1\n2,0,0,2\n").unwrap_err();
        assert!(err.to_string().contains("test.csv:3"), "{err}");
        assert!(parse("t,x,y,p\n").is_err());
        assert!(parse("t_us,x,y,p\n5,0,0,1\n4,0,0,1\n").is_err());
        assert!(parse("t_us,x,y,p\n5,8,0,1\n").is_err());
        assert!(parse("t_us,x,y,p\n5,0,0\n").is_err());
        assert!(parse("t_us,x,y,p\nfive,0,0,1\n").is_err());
    }
}
