//! Just enough PDF to read a native text layer and to write plain text pages.
//!
//! The reader scans for `N G obj` definitions instead of trusting the xref
//! table, follows the page tree from the catalog, and interprets the text
//! operators of each content stream. Glyph widths are estimated, so line
//! extents are approximate; baselines are exact.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Average glyph advance as a fraction of the font size.
pub const GLYPH_WIDTH: f64 = 0.5;
pub const ASCENT: f64 = 0.75;
pub const DESCENT: f64 = 0.25;

fn format_err(message: impl Into<String>) -> Error {
    Error::Format { format: "pdf".into(), message: message.into() }
}

#[derive(Debug, Clone, PartialEq)]
enum Obj {
    Null,
    Bool(bool),
    Num(f64),
    Str(Vec<u8>),
    Name(String),
    Array(Vec<Obj>),
    Dict(BTreeMap<String, Obj>),
    Ref(u32, u16),
    Stream(BTreeMap<String, Obj>, Vec<u8>),
    /// Bare keyword; only meaningful inside content streams.
    Op(String),
}

impl Obj {
    fn as_f64(&self) -> Option<f64> {
        match self {
            Obj::Num(n) => Some(*n),
            _ => None,
        }
    }

    fn dict(&self) -> Option<&BTreeMap<String, Obj>> {
        match self {
            Obj::Dict(d) | Obj::Stream(d, _) => Some(d),
            _ => None,
        }
    }

    fn name(&self) -> Option<&str> {
        match self {
            Obj::Name(n) => Some(n),
            _ => None,
        }
    }
}

fn is_ws(c: u8) -> bool {
    matches!(c, b'\0' | b'\t' | b'\n' | b'\x0c' | b'\r' | b' ')
}

fn is_delim(c: u8) -> bool {
    matches!(c, b'(' | b')' | b'<' | b'>' | b'[' | b']' | b'{' | b'}' | b'/' | b'%')
}

fn is_regular(c: u8) -> bool {
    !is_ws(c) && !is_delim(c)
}

struct Lexer<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Lexer<'a> {
    fn new(b: &'a [u8], pos: usize) -> Self {
        Self { b, pos }
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.pos >= self.b.len()
    }

    fn skip_ws(&mut self) {
        while self.pos < self.b.len() {
            let c = self.b[self.pos];
            if is_ws(c) {
                self.pos += 1;
            } else if c == b'%' {
                while self.pos < self.b.len() && !matches!(self.b[self.pos], b'\r' | b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn regular_run(&mut self) -> &'a [u8] {
        let start = self.pos;
        while self.pos < self.b.len() && is_regular(self.b[self.pos]) {
            self.pos += 1;
        }
        &self.b[start..self.pos]
    }

    fn parse(&mut self) -> Result<Obj> {
        self.parse_depth(0)
    }

    fn parse_depth(&mut self, depth: usize) -> Result<Obj> {
        if depth > 64 {
            return Err(format_err("objects nested too deeply"));
        }
        self.skip_ws();
        let Some(&c) = self.b.get(self.pos) else {
            return Err(format_err("unexpected end of data"));
        };
        match c {
            b'/' => {
                self.pos += 1;
                Ok(Obj::Name(decode_name(self.regular_run())))
            }
            b'(' => self.literal_string().map(Obj::Str),
            b'<' if self.b.get(self.pos + 1) == Some(&b'<') => {
                self.pos += 2;
                let mut dict = BTreeMap::new();
                loop {
                    self.skip_ws();
                    if self.b[self.pos..].starts_with(b">>") {
                        self.pos += 2;
                        return Ok(Obj::Dict(dict));
                    }
                    let key = match self.parse_depth(depth + 1)? {
                        Obj::Name(n) => n,
                        other => return Err(format_err(format!("dictionary key {other:?} is not a name"))),
                    };
                    let value = self.parse_depth(depth + 1)?;
                    dict.insert(key, value);
                }
            }
            b'<' => self.hex_string().map(Obj::Str),
            b'[' => {
                self.pos += 1;
                let mut items = Vec::new();
                loop {
                    self.skip_ws();
                    match self.b.get(self.pos) {
                        Some(b']') => {
                            self.pos += 1;
                            return Ok(Obj::Array(items));
                        }
                        Some(_) => items.push(self.parse_depth(depth + 1)?),
                        None => return Err(format_err("unterminated array")),
                    }
                }
            }
            b'0'..=b'9' | b'+' | b'-' | b'.' => {
                let tok = self.regular_run();
                let n = parse_number(tok)?;
                if tok.iter().all(u8::is_ascii_digit) {
                    let save = self.pos;
                    if let Some(r) = self.try_ref(n) {
                        return Ok(r);
                    }
                    self.pos = save;
                }
                Ok(Obj::Num(n))
            }
            _ if is_regular(c) => {
                let tok = self.regular_run();
                Ok(match tok {
                    b"true" => Obj::Bool(true),
                    b"false" => Obj::Bool(false),
                    b"null" => Obj::Null,
                    _ => Obj::Op(String::from_utf8_lossy(tok).into_owned()),
                })
            }
            _ => Err(format_err(format!("unexpected byte {c:#04x} at offset {}", self.pos))),
        }
    }

    fn try_ref(&mut self, num: f64) -> Option<Obj> {
        self.skip_ws();
        let gen = self.regular_run();
        if gen.is_empty() || !gen.iter().all(u8::is_ascii_digit) {
            return None;
        }
        self.skip_ws();
        if self.regular_run() != b"R" {
            return None;
        }
        let gen = std::str::from_utf8(gen).ok()?.parse().ok()?;
        Some(Obj::Ref(num as u32, gen))
    }

    fn literal_string(&mut self) -> Result<Vec<u8>> {
        self.pos += 1;
        let mut out = Vec::new();
        let mut depth = 1;
        while let Some(&c) = self.b.get(self.pos) {
            self.pos += 1;
            match c {
                b'(' => {
                    depth += 1;
                    out.push(c);
                }
                b')' => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok(out);
                    }
                    out.push(c);
                }
                b'\\' => {
                    let Some(&e) = self.b.get(self.pos) else { break };
                    self.pos += 1;
                    match e {
                        b'n' => out.push(b'\n'),
                        b'r' => out.push(b'\r'),
                        b't' => out.push(b'\t'),
                        b'b' => out.push(0x08),
                        b'f' => out.push(0x0c),
                        b'\r' => {
                            if self.b.get(self.pos) == Some(&b'\n') {
                                self.pos += 1;
                            }
                        }
                        b'\n' => {}
                        b'0'..=b'7' => {
                            let mut v = u32::from(e - b'0');
                            for _ in 0..2 {
                                match self.b.get(self.pos) {
                                    Some(d @ b'0'..=b'7') => {
                                        v = v * 8 + u32::from(d - b'0');
                                        self.pos += 1;
                                    }
                                    _ => break,
                                }
                            }
                            out.push(v as u8);
                        }
                        other => out.push(other),
                    }
                }
                _ => out.push(c),
            }
        }
        Err(format_err("unterminated string"))
    }

    fn hex_string(&mut self) -> Result<Vec<u8>> {
        self.pos += 1;
        let mut digits = Vec::new();
        loop {
            match self.b.get(self.pos) {
                Some(b'>') => {
                    self.pos += 1;
                    break;
                }
                Some(c) if c.is_ascii_hexdigit() => digits.push(*c),
                Some(c) if is_ws(*c) => {}
                Some(c) => return Err(format_err(format!("bad hex digit {:?}", *c as char))),
                None => return Err(format_err("unterminated hex string")),
            }
            self.pos += 1;
        }
        if digits.len() % 2 == 1 {
            digits.push(b'0');
        }
        Ok(digits
            .chunks(2)
            .map(|p| u8::from_str_radix(std::str::from_utf8(p).unwrap_or("00"), 16).unwrap_or(0))
            .collect())
    }
}

fn decode_name(raw: &[u8]) -> String {
    let mut out = Vec::with_capacity(raw.len());
    let mut i = 0;
    while i < raw.len() {
        if raw[i] == b'#' && i + 2 < raw.len() {
            if let Ok(v) = u8::from_str_radix(std::str::from_utf8(&raw[i + 1..i + 3]).unwrap_or("zz"), 16) {
                out.push(v);
                i += 3;
                continue;
            }
        }
        out.push(raw[i]);
        i += 1;
    }
    String::from_utf8_lossy(&out).into_owned()
}

fn parse_number(tok: &[u8]) -> Result<f64> {
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse::<f64>().ok())
        .filter(|n| n.is_finite())
        .ok_or_else(|| format_err(format!("bad number {:?}", String::from_utf8_lossy(tok))))
}

/// Reads `N G` immediately before `obj_at`, returning the object number.
fn object_header(b: &[u8], obj_at: usize) -> Option<u32> {
    let mut i = obj_at;
    let skip_ws_back = |i: &mut usize| {
        while *i > 0 && is_ws(b[*i - 1]) {
            *i -= 1;
        }
    };
    let digits_back = |i: &mut usize| {
        let end = *i;
        while *i > 0 && b[*i - 1].is_ascii_digit() {
            *i -= 1;
        }
        (*i < end).then_some((*i, end))
    };
    let ws_end = i;
    skip_ws_back(&mut i);
    if i == ws_end {
        return None;
    }
    digits_back(&mut i)?;
    let ws_end = i;
    skip_ws_back(&mut i);
    if i == ws_end {
        return None;
    }
    let (start, end) = digits_back(&mut i)?;
    if start > 0 && is_regular(b[start - 1]) {
        return None;
    }
    std::str::from_utf8(&b[start..end]).ok()?.parse().ok()
}

struct ObjectTable {
    objects: BTreeMap<u32, Obj>,
    catalog: Option<u32>,
    encrypted: bool,
}

impl ObjectTable {
    fn scan(b: &[u8]) -> Result<Self> {
        if !b.starts_with(b"%PDF-") && !b.windows(5).take(1024).any(|w| w == b"%PDF-") {
            return Err(format_err("missing %PDF- header"));
        }
        let mut objects = BTreeMap::new();
        let mut order = Vec::new();
        let mut cursor = 0;
        while let Some(off) = find(&b[cursor..], b"obj") {
            let at = cursor + off;
            cursor = at + 3;
            if b.get(at + 3).is_some_and(|c| is_regular(*c)) {
                continue;
            }
            let Some(num) = object_header(b, at) else { continue };
            let mut lx = Lexer::new(b, at + 3);
            let Ok(obj) = lx.parse() else { continue };
            let mut obj = obj;
            lx.skip_ws();
            if b[lx.pos..].starts_with(b"stream") {
                let mut start = lx.pos + 6;
                if b[start..].starts_with(b"\r\n") {
                    start += 2;
                } else if b.get(start) == Some(&b'\n') || b.get(start) == Some(&b'\r') {
                    start += 1;
                }
                let dict = match obj {
                    Obj::Dict(d) => d,
                    _ => continue,
                };
                let declared = dict.get("Length").and_then(Obj::as_f64).map(|n| n as usize);
                let end = match declared {
                    Some(len) if start + len <= b.len() && {
                        let mut l = Lexer::new(b, start + len);
                        l.skip_ws();
                        b[l.pos..].starts_with(b"endstream")
                    } =>
                    {
                        start + len
                    }
                    _ => {
                        let Some(e) = find(&b[start..], b"endstream") else { continue };
                        let mut end = start + e;
                        if end > start && b[end - 1] == b'\n' {
                            end -= 1;
                        }
                        if end > start && b[end - 1] == b'\r' {
                            end -= 1;
                        }
                        end
                    }
                };
                cursor = end;
                obj = Obj::Stream(dict, b[start..end].to_vec());
            } else {
                cursor = cursor.max(lx.pos);
            }
            order.push(num);
            objects.insert(num, obj);
        }
        let mut encrypted = table_trailers(b).any(|d| d.contains_key("Encrypt"));
        encrypted |= objects.values().any(|o| {
            matches!(o, Obj::Stream(d, _) if d.get("Type").and_then(Obj::name) == Some("XRef") && d.contains_key("Encrypt"))
        });
        let mut table = Self { objects, catalog: None, encrypted };
        table.expand_object_streams();
        table.catalog = order
            .iter()
            .rev()
            .copied()
            .chain(table.objects.keys().copied())
            .find(|n| table.type_of(&table.objects[n]) == Some("Catalog"));
        Ok(table)
    }

    fn expand_object_streams(&mut self) {
        let streams: Vec<(BTreeMap<String, Obj>, Vec<u8>)> = self
            .objects
            .values()
            .filter_map(|o| match o {
                Obj::Stream(d, data) if d.get("Type").and_then(Obj::name) == Some("ObjStm") => {
                    Some((d.clone(), data.clone()))
                }
                _ => None,
            })
            .collect();
        for (dict, raw) in streams {
            let Ok(data) = decode_stream(&dict, &raw) else { continue };
            let n = dict.get("N").and_then(Obj::as_f64).unwrap_or(0.0) as usize;
            let first = dict.get("First").and_then(Obj::as_f64).unwrap_or(0.0) as usize;
            let mut lx = Lexer::new(&data, 0);
            let mut header = Vec::new();
            for _ in 0..n {
                match (lx.parse(), lx.parse()) {
                    (Ok(Obj::Num(num)), Ok(Obj::Num(off))) => header.push((num as u32, off as usize)),
                    _ => break,
                }
            }
            for (num, off) in header {
                if first + off >= data.len() {
                    continue;
                }
                if let Ok(obj) = Lexer::new(&data, first + off).parse() {
                    self.objects.entry(num).or_insert(obj);
                }
            }
        }
    }

    fn resolve<'s>(&'s self, mut obj: &'s Obj) -> &'s Obj {
        for _ in 0..32 {
            match obj {
                Obj::Ref(n, _) => match self.objects.get(n) {
                    Some(o) => obj = o,
                    None => return &Obj::Null,
                },
                _ => return obj,
            }
        }
        &Obj::Null
    }

    fn get<'s>(&'s self, dict: &'s BTreeMap<String, Obj>, key: &str) -> &'s Obj {
        dict.get(key).map_or(&Obj::Null, |o| self.resolve(o))
    }

    fn type_of<'s>(&'s self, obj: &'s Obj) -> Option<&'s str> {
        obj.dict().and_then(|d| self.get(d, "Type").name())
    }

    fn media_box(&self, dict: &BTreeMap<String, Obj>) -> Option<(f64, f64)> {
        let Obj::Array(items) = self.get(dict, "MediaBox") else { return None };
        let v: Vec<f64> = items.iter().filter_map(|o| self.resolve(o).as_f64()).collect();
        if v.len() != 4 {
            return None;
        }
        let (w, h) = ((v[2] - v[0]).abs(), (v[3] - v[1]).abs());
        (w > 0.0 && h > 0.0).then_some((w, h))
    }

    fn collect_pages<'s>(
        &'s self,
        node: &'s Obj,
        inherited: Option<(f64, f64)>,
        depth: usize,
        out: &mut Vec<(&'s BTreeMap<String, Obj>, (f64, f64))>,
    ) -> Result<()> {
        if depth > 64 {
            return Err(format_err("page tree too deep"));
        }
        let Some(dict) = self.resolve(node).dict() else {
            return Err(format_err("page tree node is not a dictionary"));
        };
        let media = self.media_box(dict).or(inherited);
        match self.get(dict, "Kids") {
            Obj::Array(kids) if self.get(dict, "Type").name() != Some("Page") => {
                for kid in kids {
                    self.collect_pages(kid, media, depth + 1, out)?;
                }
            }
            _ => out.push((dict, media.unwrap_or((612.0, 792.0)))),
        }
        Ok(())
    }

    fn content_bytes(&self, page: &BTreeMap<String, Obj>) -> Result<Vec<u8>> {
        let parts: Vec<&Obj> = match page.get("Contents").map(|o| (o, self.resolve(o))) {
            None => Vec::new(),
            Some((_, Obj::Array(items))) => items.iter().map(|o| self.resolve(o)).collect(),
            Some((_, other)) => vec![other],
        };
        let mut out = Vec::new();
        for part in parts {
            if let Obj::Stream(dict, raw) = part {
                out.extend(decode_stream(dict, raw)?);
                out.push(b'\n');
            }
        }
        Ok(out)
    }
}

fn table_trailers(b: &[u8]) -> impl Iterator<Item = BTreeMap<String, Obj>> + '_ {
    let mut cursor = 0;
    std::iter::from_fn(move || loop {
        let at = cursor + find(&b[cursor..], b"trailer")?;
        cursor = at + 7;
        if let Ok(Obj::Dict(d)) = Lexer::new(b, cursor).parse() {
            return Some(d);
        }
    })
}

fn find(hay: &[u8], needle: &[u8]) -> Option<usize> {
    hay.windows(needle.len()).position(|w| w == needle)
}

fn decode_stream(dict: &BTreeMap<String, Obj>, raw: &[u8]) -> Result<Vec<u8>> {
    let filters: Vec<&str> = match dict.get("Filter") {
        None => Vec::new(),
        Some(Obj::Name(n)) => vec![n.as_str()],
        Some(Obj::Array(items)) => items.iter().filter_map(Obj::name).collect(),
        Some(other) => return Err(format_err(format!("unsupported filter {other:?}"))),
    };
    let mut data = raw.to_vec();
    for filter in filters {
        data = match filter {
            "FlateDecode" | "Fl" => inflate(&data)?,
            "ASCIIHexDecode" | "AHx" => {
                let mut wrapped = vec![b'<'];
                wrapped.extend(data.iter().take_while(|c| **c != b'>'));
                wrapped.push(b'>');
                Lexer::new(&wrapped, 0).hex_string()?
            }
            "ASCII85Decode" | "A85" => ascii85(&data)?,
            other => return Err(format_err(format!("unsupported stream filter {other}"))),
        };
    }
    Ok(data)
}

fn inflate(data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    if flate2::read::ZlibDecoder::new(data).read_to_end(&mut out).is_ok() {
        return Ok(out);
    }
    out.clear();
    flate2::read::DeflateDecoder::new(data)
        .read_to_end(&mut out)
        .map_err(|e| format_err(format!("corrupt deflate stream: {e}")))?;
    Ok(out)
}

fn ascii85(data: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    let mut group = Vec::with_capacity(5);
    let body = data.strip_prefix(b"<~").unwrap_or(data);
    for &c in body {
        match c {
            b'~' => break,
            b'z' if group.is_empty() => out.extend([0; 4]),
            b'!'..=b'u' => {
                group.push(u32::from(c - b'!'));
                if group.len() == 5 {
                    let v = group.iter().fold(0u64, |acc, d| acc * 85 + u64::from(*d));
                    out.extend((v as u32).to_be_bytes());
                    group.clear();
                }
            }
            c if is_ws(c) => {}
            c => return Err(format_err(format!("bad ASCII85 byte {c:#04x}"))),
        }
    }
    if !group.is_empty() {
        let n = group.len();
        while group.len() < 5 {
            group.push(84);
        }
        let v = group.iter().fold(0u64, |acc, d| acc * 85 + u64::from(*d));
        out.extend(&(v as u32).to_be_bytes()[..n - 1]);
    }
    Ok(out)
}

/// One visual line of the text layer, in top-left page coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextLine {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub size: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PdfPage {
    pub width: f64,
    pub height: f64,
    pub lines: Vec<TextLine>,
}

type Matrix = [f64; 6];
const IDENTITY: Matrix = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0];

fn mul(m: &Matrix, n: &Matrix) -> Matrix {
    [
        m[0] * n[0] + m[1] * n[2],
        m[0] * n[1] + m[1] * n[3],
        m[2] * n[0] + m[3] * n[2],
        m[2] * n[1] + m[3] * n[3],
        m[4] * n[0] + m[5] * n[2] + n[4],
        m[4] * n[1] + m[5] * n[3] + n[5],
    ]
}

fn translate(tx: f64, ty: f64) -> Matrix {
    [1.0, 0.0, 0.0, 1.0, tx, ty]
}

struct Run {
    x: f64,
    baseline: f64,
    size: f64,
    text: String,
}

fn decode_text(bytes: &[u8]) -> String {
    if bytes.starts_with(&[0xFE, 0xFF]) {
        let units: Vec<u16> = bytes[2..].chunks(2).map(|p| u16::from_be_bytes([p[0], *p.get(1).unwrap_or(&0)])).collect();
        return String::from_utf16_lossy(&units);
    }
    bytes.iter().map(|&b| if b >= 0x20 { char::from(b) } else { ' ' }).collect()
}

fn text_runs(content: &[u8], page_height: f64) -> Vec<Run> {
    let mut runs = Vec::new();
    let mut operands: Vec<Obj> = Vec::new();
    let mut ctm = IDENTITY;
    let mut saved: Vec<Matrix> = Vec::new();
    let (mut tm, mut tlm) = (IDENTITY, IDENTITY);
    let (mut font_size, mut leading) = (0.0_f64, 0.0_f64);
    let mut lx = Lexer::new(content, 0);

    let num = |ops: &[Obj], i: usize| ops.get(i).and_then(Obj::as_f64).unwrap_or(0.0);
    let show = |text: String, tm: &mut Matrix, ctm: &Matrix, font_size: f64, runs: &mut Vec<Run>| {
        let m = mul(tm, ctm);
        let scale = (m[2] * m[2] + m[3] * m[3]).sqrt();
        let size = font_size * if scale > 0.0 { scale } else { 1.0 };
        let advance = text.chars().count() as f64 * font_size * GLYPH_WIDTH;
        if !text.trim().is_empty() {
            runs.push(Run { x: m[4], baseline: page_height - m[5], size, text });
        }
        *tm = mul(&translate(advance, 0.0), tm);
    };

    while !lx.at_end() {
        let Ok(obj) = lx.parse() else {
            lx.pos += 1;
            operands.clear();
            continue;
        };
        let Obj::Op(op) = obj else {
            operands.push(obj);
            continue;
        };
        match op.as_str() {
            "q" => saved.push(ctm),
            "Q" => ctm = saved.pop().unwrap_or(IDENTITY),
            "cm" if operands.len() >= 6 => {
                let m = [0, 1, 2, 3, 4, 5].map(|i| num(&operands, i));
                ctm = mul(&m, &ctm);
            }
            "BT" => {
                tm = IDENTITY;
                tlm = IDENTITY;
            }
            "Tf" => font_size = num(&operands, 1),
            "TL" => leading = num(&operands, 0),
            "Td" | "TD" => {
                let (tx, ty) = (num(&operands, 0), num(&operands, 1));
                if op == "TD" {
                    leading = -ty;
                }
                tlm = mul(&translate(tx, ty), &tlm);
                tm = tlm;
            }
            "Tm" if operands.len() >= 6 => {
                tlm = [0, 1, 2, 3, 4, 5].map(|i| num(&operands, i));
                tm = tlm;
            }
            "T*" => {
                tlm = mul(&translate(0.0, -leading), &tlm);
                tm = tlm;
            }
            "Tj" | "'" | "\"" => {
                if op != "Tj" {
                    tlm = mul(&translate(0.0, -leading), &tlm);
                    tm = tlm;
                }
                if let Some(Obj::Str(s)) = operands.last() {
                    show(decode_text(s), &mut tm, &ctm, font_size, &mut runs);
                }
            }
            "TJ" => {
                if let Some(Obj::Array(items)) = operands.last() {
                    let mut text = String::new();
                    for item in items {
                        match item {
                            Obj::Str(s) => text.push_str(&decode_text(s)),
                            // kerning beyond a fifth of an em reads as a word gap
                            Obj::Num(n) if *n < -200.0 && !text.ends_with(' ') => text.push(' '),
                            _ => {}
                        }
                    }
                    show(text, &mut tm, &ctm, font_size, &mut runs);
                }
            }
            "BI" => {
                // inline image data is binary; skip to the EI marker
                match find(&content[lx.pos..], b"EI") {
                    Some(off) => lx.pos += off + 2,
                    None => lx.pos = content.len(),
                }
            }
            _ => {}
        }
        operands.clear();
    }
    runs
}

fn group_lines(mut runs: Vec<Run>, width: f64, height: f64) -> Vec<TextLine> {
    runs.sort_by(|a, b| a.baseline.total_cmp(&b.baseline).then(a.x.total_cmp(&b.x)));
    let mut lines: Vec<(f64, TextLine)> = Vec::new();
    for run in runs {
        let run_x1 = run.x + run.text.chars().count() as f64 * run.size * GLYPH_WIDTH;
        match lines.last_mut() {
            Some((baseline, line)) if (run.baseline - *baseline).abs() <= 0.3 * run.size.max(line.size) => {
                if run.x > line.x1 + 0.1 * run.size && !line.text.ends_with(' ') && !run.text.starts_with(' ') {
                    line.text.push(' ');
                }
                line.text.push_str(&run.text);
                line.x1 = line.x1.max(run_x1);
                line.x0 = line.x0.min(run.x);
            }
            _ => lines.push((
                run.baseline,
                TextLine {
                    x0: run.x,
                    y0: run.baseline - ASCENT * run.size,
                    x1: run_x1,
                    y1: run.baseline + DESCENT * run.size,
                    size: run.size,
                    text: run.text,
                },
            )),
        }
    }
    lines
        .into_iter()
        .filter_map(|(_, mut l)| {
            l.text = l.text.split_whitespace().collect::<Vec<_>>().join(" ");
            l.x0 = l.x0.clamp(0.0, width);
            l.x1 = l.x1.clamp(0.0, width);
            l.y0 = l.y0.clamp(0.0, height);
            l.y1 = l.y1.clamp(0.0, height);
            (!l.text.is_empty() && l.x1 > l.x0 && l.y1 > l.y0).then_some(l)
        })
        .collect()
}

/// Parses a PDF and returns its pages with their text lines in reading order.
pub fn read(bytes: &[u8]) -> Result<Vec<PdfPage>> {
    let table = ObjectTable::scan(bytes)?;
    if table.encrypted {
        return Err(format_err("encrypted PDFs are not supported"));
    }
    // composite fonts need their CMaps to decode; the byte-per-glyph reading below would be garbage
    let composite = table.objects.values().any(|o| {
        table.type_of(o) == Some("Font") && o.dict().and_then(|d| table.get(d, "Subtype").name()) == Some("Type0")
    });
    if composite {
        return Err(format_err("composite (Type0/CID) fonts are not supported"));
    }
    let catalog = table.catalog.ok_or_else(|| format_err("no document catalog"))?;
    let catalog = table.objects[&catalog].dict().ok_or_else(|| format_err("catalog is not a dictionary"))?;
    let root = catalog.get("Pages").ok_or_else(|| format_err("catalog has no page tree"))?;
    let mut pages = Vec::new();
    table.collect_pages(root, None, 0, &mut pages)?;
    pages
        .into_iter()
        .map(|(dict, (width, height))| {
            let content = table.content_bytes(dict)?;
            let lines = group_lines(text_runs(&content, height), width, height);
            Ok(PdfPage { width, height, lines })
        })
        .collect()
}

/// A line of text to place on a written page; `baseline` is measured from the top.
#[derive(Debug, Clone, PartialEq)]
pub struct TextRun {
    pub x: f64,
    pub baseline: f64,
    pub size: f64,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PageSpec {
    pub width: f64,
    pub height: f64,
    pub runs: Vec<TextRun>,
}

fn fmt_num(v: f64) -> String {
    let s = format!("{v:.2}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() || s == "-0" {
        "0".into()
    } else {
        s.into()
    }
}

fn escape_literal(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '(' | ')' | '\\' => {
                out.push('\\');
                out.push(c);
            }
            c if (c as u32) < 0x20 => out.push(' '),
            c if (c as u32) < 0x7f => out.push(c),
            // outside ASCII the base-14 fonts need an encoding table; keep the writer plain
            c if (c as u32) <= 0xff => {
                let _ = write!(out, "\\{:03o}", c as u32);
            }
            _ => out.push('?'),
        }
    }
    out
}

/// Writes an uncompressed PDF with one Helvetica text run per line.
pub fn write(pages: &[PageSpec]) -> Vec<u8> {
    let mut objects: Vec<Vec<u8>> = Vec::new();
    let page_ids: Vec<usize> = (0..pages.len()).map(|i| 4 + 2 * i).collect();
    objects.push(b"<< /Type /Catalog /Pages 2 0 R >>".to_vec());
    let kids: Vec<String> = page_ids.iter().map(|id| format!("{id} 0 R")).collect();
    objects.push(format!("<< /Type /Pages /Kids [{}] /Count {} >>", kids.join(" "), pages.len()).into_bytes());
    objects.push(b"<< /Type /Font /Subtype /Type1 /BaseFont /Helvetica /Encoding /WinAnsiEncoding >>".to_vec());
    for (page, id) in pages.iter().zip(&page_ids) {
        let mut content = String::new();
        for run in &page.runs {
            let _ = writeln!(
                content,
                "BT /F1 {} Tf 1 0 0 1 {} {} Tm ({}) Tj ET",
                fmt_num(run.size),
                fmt_num(run.x),
                fmt_num(page.height - run.baseline),
                escape_literal(&run.text)
            );
        }
        objects.push(
            format!(
                "<< /Type /Page /Parent 2 0 R /MediaBox [0 0 {} {}] /Resources << /Font << /F1 3 0 R >> >> /Contents {} 0 R >>",
                fmt_num(page.width),
                fmt_num(page.height),
                id + 1
            )
            .into_bytes(),
        );
        let mut stream = format!("<< /Length {} >>\nstream\n", content.len()).into_bytes();
        stream.extend(content.as_bytes());
        stream.extend(b"\nendstream");
        objects.push(stream);
    }

    let mut out = b"%PDF-1.4\n%\xe2\xe3\xcf\xd3\n".to_vec();
    let mut offsets = Vec::with_capacity(objects.len());
    for (i, body) in objects.iter().enumerate() {
        offsets.push(out.len());
        out.extend(format!("{} 0 obj\n", i + 1).as_bytes());
        out.extend(body);
        out.extend(b"\nendobj\n");
    }
    let xref = out.len();
    let mut tail = format!("xref\n0 {}\n0000000000 65535 f \n", objects.len() + 1);
    for off in offsets {
        let _ = writeln!(tail, "{off:010} 00000 n ");
    }
    let _ = write!(tail, "trailer\n<< /Size {} /Root 1 0 R >>\nstartxref\n{xref}\n%%EOF\n", objects.len() + 1);
    out.extend(tail.as_bytes());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn page(lines: &[&str]) -> PageSpec {
        PageSpec {
            width: 612.0,
            height: 792.0,
            runs: lines
                .iter()
                .enumerate()
                .map(|(i, t)| TextRun { x: 72.0, baseline: 100.0 + 14.0 * i as f64, size: 10.0, text: t.to_string() })
                .collect(),
        }
    }

    #[test]
    fn write_then_read_round_trips_lines() {
        let bytes = write(&[page(&["Hello (world)", "second \\ line"]), page(&["café"])]);
        let pages = read(&bytes).unwrap();
        assert_eq!(pages.len(), 2);
        assert_eq!(pages[0].lines.len(), 2);
        assert_eq!(pages[0].lines[0].text, "Hello (world)");
        assert_eq!(pages[0].lines[1].text, "second \\ line");
        assert_eq!(pages[1].lines[0].text, "café");
        let l = &pages[0].lines[0];
        assert!((l.y0 - (100.0 - 7.5)).abs() < 1e-9 && (l.y1 - 102.5).abs() < 1e-9);
        assert_eq!(l.x0, 72.0);
    }

    #[test]
    fn flate_content_and_tj_arrays() {
        use flate2::write::ZlibEncoder;
        use std::io::Write;
        let content = b"BT /F1 12 Tf 14 TL 50 700 Td [(Hel) 20 (lo) -400 (there)] TJ T* (next) Tj ET";
        let mut enc = ZlibEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(content).unwrap();
        let z = enc.finish().unwrap();
        let mut pdf = b"%PDF-1.5\n1 0 obj << /Type /Catalog /Pages 2 0 R >> endobj\n".to_vec();
        pdf.extend(b"2 0 obj << /Type /Pages /Kids [3 0 R] /Count 1 /MediaBox [0 0 600 800] >> endobj\n");
        pdf.extend(b"3 0 obj << /Type /Page /Parent 2 0 R /Contents 4 0 R >> endobj\n");
        pdf.extend(format!("4 0 obj << /Length {} /Filter /FlateDecode >> stream\n", z.len()).as_bytes());
        pdf.extend(&z);
        pdf.extend(b"\nendstream endobj\ntrailer << /Root 1 0 R >>\n%%EOF");
        let pages = read(&pdf).unwrap();
        assert_eq!((pages[0].width, pages[0].height), (600.0, 800.0));
        let texts: Vec<&str> = pages[0].lines.iter().map(|l| l.text.as_str()).collect();
        assert_eq!(texts, ["Hello there", "next"]);
        assert!((pages[0].lines[1].y1 - (800.0 - 686.0 + 3.0)).abs() < 1e-9);
    }

    #[test]
    fn garbage_is_a_format_error() {
        assert!(matches!(read(b"not a pdf"), Err(Error::Format { .. })));
        assert!(matches!(read(b"%PDF-1.4\n1 0 obj << /Foo 1 >> endobj"), Err(Error::Format { .. })));
        let ok = write(&[PageSpec { width: 200.0, height: 200.0, runs: vec![] }]);
        assert!(read(&ok).is_ok());
        let mut encrypted = ok.clone();
        let tail = encrypted.windows(5).rposition(|w| w == b"/Root").unwrap();
        encrypted.splice(tail..tail, b"/Encrypt 9 0 R ".iter().copied());
        assert!(matches!(read(&encrypted), Err(Error::Format { message, .. }) if message.contains("encrypted")));
        let mut cid = ok;
        cid.splice(9..9, b"9 0 obj << /Type /Font /Subtype /Type0 /BaseFont /X >> endobj\n".iter().copied());
        assert!(matches!(read(&cid), Err(Error::Format { message, .. }) if message.contains("Type0")));
    }

    #[test]
    fn ascii85_decodes() {
        assert_eq!(ascii85(b"<~87cURD_*#4DfTZ)~>").unwrap(), b"Hello, World");
        assert_eq!(ascii85(b"<~z~>").unwrap(), [0u8; 4]);
    }
}
