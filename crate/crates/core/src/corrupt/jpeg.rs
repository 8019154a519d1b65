//! Minimal baseline JPEG (JFIF) codec.
//!
//! The encoder writes 8-bit YCbCr with 4:2:0 chroma subsampling, the
//! standard quantization tables scaled by the usual quality formula, and the
//! standard Huffman tables. The decoder handles baseline sequential streams
//! with one interleaved scan (grayscale or three components), arbitrary
//! sampling factors and restart intervals.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum JpegError {
    #[error("not a JPEG stream (missing SOI)")]
    NotJpeg,
    #[error("stream ended unexpectedly")]
    Truncated,
    #[error("unsupported JPEG feature: {0}")]
    Unsupported(String),
    #[error("malformed JPEG: {0}")]
    Malformed(String),
}

type Result<T> = std::result::Result<T, JpegError>;

pub const ZIGZAG: [usize; 64] = [
    0, 1, 8, 16, 9, 2, 3, 10, 17, 24, 32, 25, 18, 11, 4, 5, 12, 19, 26, 33, 40, 48, 41, 34, 27,
    20, 13, 6, 7, 14, 21, 28, 35, 42, 49, 56, 57, 50, 43, 36, 29, 22, 15, 23, 30, 37, 44, 51, 58,
    59, 52, 45, 38, 31, 39, 46, 53, 60, 61, 54, 47, 55, 62, 63,
];

const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, 12, 12, 14, 19, 26, 58, 60, 55, 14, 13, 16, 24, 40, 57, 69,
    56, 14, 17, 22, 29, 51, 87, 80, 62, 18, 22, 37, 56, 68, 109, 103, 77, 24, 35, 55, 64, 81, 104,
    113, 92, 49, 64, 78, 87, 103, 121, 120, 101, 72, 92, 95, 98, 112, 100, 103, 99,
];

const CHROMA_QUANT: [u16; 64] = [
    17, 18, 24, 47, 99, 99, 99, 99, 18, 21, 26, 66, 99, 99, 99, 99, 24, 26, 56, 99, 99, 99, 99,
    99, 47, 66, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99, 99,
];

const DC_LUMA_BITS: [u8; 16] = [0, 1, 5, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
const DC_CHROMA_BITS: [u8; 16] = [0, 3, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0];
const DC_VALUES: [u8; 12] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11];

const AC_LUMA_BITS: [u8; 16] = [0, 2, 1, 3, 3, 2, 4, 3, 5, 5, 4, 4, 0, 0, 1, 0x7d];
const AC_LUMA_VALUES: [u8; 162] = [
    0x01, 0x02, 0x03, 0x00, 0x04, 0x11, 0x05, 0x12, 0x21, 0x31, 0x41, 0x06, 0x13, 0x51, 0x61, 0x07,
    0x22, 0x71, 0x14, 0x32, 0x81, 0x91, 0xa1, 0x08, 0x23, 0x42, 0xb1, 0xc1, 0x15, 0x52, 0xd1, 0xf0,
    0x24, 0x33, 0x62, 0x72, 0x82, 0x09, 0x0a, 0x16, 0x17, 0x18, 0x19, 0x1a, 0x25, 0x26, 0x27, 0x28,
    0x29, 0x2a, 0x34, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48, 0x49,
    0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68, 0x69,
    0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x83, 0x84, 0x85, 0x86, 0x87, 0x88, 0x89,
    0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5, 0xa6, 0xa7,
    0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3, 0xc4, 0xc5,
    0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda, 0xe1, 0xe2,
    0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf1, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

const AC_CHROMA_BITS: [u8; 16] = [0, 2, 1, 2, 4, 4, 3, 4, 7, 5, 4, 4, 0, 1, 2, 0x77];
const AC_CHROMA_VALUES: [u8; 162] = [
    0x00, 0x01, 0x02, 0x03, 0x11, 0x04, 0x05, 0x21, 0x31, 0x06, 0x12, 0x41, 0x51, 0x07, 0x61, 0x71,
    0x13, 0x22, 0x32, 0x81, 0x08, 0x14, 0x42, 0x91, 0xa1, 0xb1, 0xc1, 0x09, 0x23, 0x33, 0x52, 0xf0,
    0x15, 0x62, 0x72, 0xd1, 0x0a, 0x16, 0x24, 0x34, 0xe1, 0x25, 0xf1, 0x17, 0x18, 0x19, 0x1a, 0x26,
    0x27, 0x28, 0x29, 0x2a, 0x35, 0x36, 0x37, 0x38, 0x39, 0x3a, 0x43, 0x44, 0x45, 0x46, 0x47, 0x48,
    0x49, 0x4a, 0x53, 0x54, 0x55, 0x56, 0x57, 0x58, 0x59, 0x5a, 0x63, 0x64, 0x65, 0x66, 0x67, 0x68,
    0x69, 0x6a, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79, 0x7a, 0x82, 0x83, 0x84, 0x85, 0x86, 0x87,
    0x88, 0x89, 0x8a, 0x92, 0x93, 0x94, 0x95, 0x96, 0x97, 0x98, 0x99, 0x9a, 0xa2, 0xa3, 0xa4, 0xa5,
    0xa6, 0xa7, 0xa8, 0xa9, 0xaa, 0xb2, 0xb3, 0xb4, 0xb5, 0xb6, 0xb7, 0xb8, 0xb9, 0xba, 0xc2, 0xc3,
    0xc4, 0xc5, 0xc6, 0xc7, 0xc8, 0xc9, 0xca, 0xd2, 0xd3, 0xd4, 0xd5, 0xd6, 0xd7, 0xd8, 0xd9, 0xda,
    0xe2, 0xe3, 0xe4, 0xe5, 0xe6, 0xe7, 0xe8, 0xe9, 0xea, 0xf2, 0xf3, 0xf4, 0xf5, 0xf6, 0xf7, 0xf8,
    0xf9, 0xfa,
];

/// Scales a base table for `quality` in 1..=100 (IJG convention).
pub fn scaled_quant_table(base: &[u16; 64], quality: u8) -> [u16; 64] {
    let q = quality.clamp(1, 100) as u32;
    let scale = if q < 50 { 5000 / q } else { 200 - 2 * q };
    let mut out = [0u16; 64];
    for (o, &b) in out.iter_mut().zip(base) {
        *o = ((b as u32 * scale + 50) / 100).clamp(1, 255) as u16;
    }
    out
}

/// `basis[u][x] = C(u)/2 * cos((2x+1) u pi / 16)`.
fn dct_basis() -> [[f64; 8]; 8] {
    let mut t = [[0.0; 8]; 8];
    for (u, row) in t.iter_mut().enumerate() {
        let cu = if u == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        for (x, v) in row.iter_mut().enumerate() {
            *v = 0.5 * cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    t
}

fn fdct(block: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| basis[u][x] * block[y * 8 + x]).sum();
        }
    }
    let mut out = [0.0; 64];
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| basis[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

fn idct(coef: &[f64; 64], basis: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    for v in 0..8 {
        for x in 0..8 {
            tmp[v * 8 + x] = (0..8).map(|u| basis[u][x] * coef[v * 8 + u]).sum();
        }
    }
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|v| basis[v][y] * tmp[v * 8 + x]).sum();
        }
    }
    out
}

#[derive(Clone, Debug)]
struct HuffmanCodes {
    code: [u16; 256],
    len: [u8; 256],
}

impl HuffmanCodes {
    fn new(bits: &[u8; 16], values: &[u8]) -> Self {
        let mut code = [0u16; 256];
        let mut len = [0u8; 256];
        let mut next = 0u16;
        let mut k = 0;
        for (l, &count) in bits.iter().enumerate() {
            for _ in 0..count {
                code[values[k] as usize] = next;
                len[values[k] as usize] = l as u8 + 1;
                next += 1;
                k += 1;
            }
            next <<= 1;
        }
        Self { code, len }
    }
}

struct BitWriter {
    out: Vec<u8>,
    acc: u32,
    nbits: u32,
}

impl BitWriter {
    fn new(out: Vec<u8>) -> Self {
        Self {
            out,
            acc: 0,
            nbits: 0,
        }
    }

    fn put(&mut self, bits: u32, count: u32) {
        for i in (0..count).rev() {
            self.acc = (self.acc << 1) | ((bits >> i) & 1);
            self.nbits += 1;
            if self.nbits == 8 {
                let byte = self.acc as u8;
                self.out.push(byte);
                if byte == 0xFF {
                    self.out.push(0x00);
                }
                self.acc = 0;
                self.nbits = 0;
            }
        }
    }

    fn finish(mut self) -> Vec<u8> {
        if self.nbits > 0 {
            let pad = 8 - self.nbits;
            self.put((1 << pad) - 1, pad);
        }
        self.out
    }
}

fn magnitude_category(v: i32) -> u32 {
    32 - v.unsigned_abs().leading_zeros()
}

fn magnitude_bits(v: i32, cat: u32) -> u32 {
    if v >= 0 {
        v as u32
    } else {
        ((v - 1) as u32) & ((1u32 << cat) - 1)
    }
}

fn encode_block(
    w: &mut BitWriter,
    coef: &[i32; 64],
    pred: &mut i32,
    dc: &HuffmanCodes,
    ac: &HuffmanCodes,
) {
    let diff = coef[0] - *pred;
    *pred = coef[0];
    let cat = magnitude_category(diff);
    w.put(dc.code[cat as usize] as u32, dc.len[cat as usize] as u32);
    if cat > 0 {
        w.put(magnitude_bits(diff, cat), cat);
    }
    let mut run = 0u32;
    for &pos in &ZIGZAG[1..] {
        let v = coef[pos];
        if v == 0 {
            run += 1;
            continue;
        }
        while run >= 16 {
            w.put(ac.code[0xF0] as u32, ac.len[0xF0] as u32);
            run -= 16;
        }
        let cat = magnitude_category(v);
        let sym = ((run << 4) | cat) as usize;
        w.put(ac.code[sym] as u32, ac.len[sym] as u32);
        w.put(magnitude_bits(v, cat), cat);
        run = 0;
    }
    if run > 0 {
        w.put(ac.code[0x00] as u32, ac.len[0x00] as u32);
    }
}

fn push_segment(out: &mut Vec<u8>, marker: u8, payload: &[u8]) {
    out.extend_from_slice(&[0xFF, marker]);
    out.extend_from_slice(&((payload.len() + 2) as u16).to_be_bytes());
    out.extend_from_slice(payload);
}

/// Encodes interleaved 8-bit RGB as a baseline 4:2:0 JFIF stream.
pub fn encode_rgb(rgb: &[u8], width: usize, height: usize, quality: u8) -> Vec<u8> {
    assert_eq!(rgb.len(), width * height * 3, "rgb buffer size");
    assert!(width > 0 && height > 0 && width <= 65535 && height <= 65535);
    let lq = scaled_quant_table(&LUMA_QUANT, quality);
    let cq = scaled_quant_table(&CHROMA_QUANT, quality);

    let mut out = vec![0xFF, 0xD8];
    push_segment(&mut out, 0xE0, b"JFIF\0\x01\x01\x00\x00\x01\x00\x01\x00\x00");
    let mut dqt = Vec::with_capacity(130);
    for (id, table) in [(0u8, &lq), (1u8, &cq)] {
        dqt.push(id);
        dqt.extend(ZIGZAG.iter().map(|&p| table[p] as u8));
    }
    push_segment(&mut out, 0xDB, &dqt);
    let mut sof = vec![8];
    sof.extend_from_slice(&(height as u16).to_be_bytes());
    sof.extend_from_slice(&(width as u16).to_be_bytes());
    sof.extend_from_slice(&[3, 1, 0x22, 0, 2, 0x11, 1, 3, 0x11, 1]);
    push_segment(&mut out, 0xC0, &sof);
    let mut dht = Vec::new();
    for (class, bits, values) in [
        (0x00u8, &DC_LUMA_BITS, &DC_VALUES[..]),
        (0x10, &AC_LUMA_BITS, &AC_LUMA_VALUES[..]),
        (0x01, &DC_CHROMA_BITS, &DC_VALUES[..]),
        (0x11, &AC_CHROMA_BITS, &AC_CHROMA_VALUES[..]),
    ] {
        dht.push(class);
        dht.extend_from_slice(bits);
        dht.extend_from_slice(values);
    }
    push_segment(&mut out, 0xC4, &dht);
    push_segment(&mut out, 0xDA, &[3, 1, 0x00, 2, 0x11, 3, 0x11, 0, 63, 0]);

    // colour planes, edge-replicated to whole 16x16 MCUs
    let mcu_x = width.div_ceil(16);
    let mcu_y = height.div_ceil(16);
    let (pw, ph) = (mcu_x * 16, mcu_y * 16);
    let mut planes = [vec![0.0f64; pw * ph], vec![0.0f64; pw * ph], vec![0.0f64; pw * ph]];
    for y in 0..ph {
        for x in 0..pw {
            let p = (y.min(height - 1) * width + x.min(width - 1)) * 3;
            let (r, g, b) = (rgb[p] as f64, rgb[p + 1] as f64, rgb[p + 2] as f64);
            planes[0][y * pw + x] = 0.299 * r + 0.587 * g + 0.114 * b;
            planes[1][y * pw + x] = -0.168736 * r - 0.331264 * g + 0.5 * b + 128.0;
            planes[2][y * pw + x] = 0.5 * r - 0.418688 * g - 0.081312 * b + 128.0;
        }
    }

    let basis = dct_basis();
    let quantize = |block: &[f64; 64], table: &[u16; 64]| -> [i32; 64] {
        let f = fdct(block, &basis);
        let mut q = [0i32; 64];
        for i in 0..64 {
            q[i] = (f[i] / table[i] as f64).round() as i32;
        }
        q
    };
    let dc_l = HuffmanCodes::new(&DC_LUMA_BITS, &DC_VALUES);
    let ac_l = HuffmanCodes::new(&AC_LUMA_BITS, &AC_LUMA_VALUES);
    let dc_c = HuffmanCodes::new(&DC_CHROMA_BITS, &DC_VALUES);
    let ac_c = HuffmanCodes::new(&AC_CHROMA_BITS, &AC_CHROMA_VALUES);

    let mut w = BitWriter::new(out);
    let mut preds = [0i32; 3];
    for my in 0..mcu_y {
        for mx in 0..mcu_x {
            for (by, bx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (py, px) = (my * 16 + by * 8 + y, mx * 16 + bx * 8 + x);
                        block[y * 8 + x] = planes[0][py * pw + px] - 128.0;
                    }
                }
                encode_block(&mut w, &quantize(&block, &lq), &mut preds[0], &dc_l, &ac_l);
            }
            for c in 1..3 {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for x in 0..8 {
                        let (py, px) = (my * 16 + 2 * y, mx * 16 + 2 * x);
                        let s = planes[c][py * pw + px]
                            + planes[c][py * pw + px + 1]
                            + planes[c][(py + 1) * pw + px]
                            + planes[c][(py + 1) * pw + px + 1];
                        block[y * 8 + x] = s / 4.0 - 128.0;
                    }
                }
                encode_block(&mut w, &quantize(&block, &cq), &mut preds[c], &dc_c, &ac_c);
            }
        }
    }
    let mut out = w.finish();
    out.extend_from_slice(&[0xFF, 0xD9]);
    out
}

/// Decoded image: interleaved 8-bit RGB (grayscale is expanded).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedImage {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

#[derive(Clone, Debug)]
struct HuffmanTable {
    /// `(length, code) -> symbol`, searched per length.
    maxcode: [i32; 17],
    valptr: [i32; 17],
    mincode: [i32; 17],
    values: Vec<u8>,
}

impl HuffmanTable {
    fn new(bits: &[u8; 16], values: Vec<u8>) -> Result<Self> {
        let total: usize = bits.iter().map(|&b| b as usize).sum();
        if total != values.len() || total > 256 {
            return Err(JpegError::Malformed("Huffman table size mismatch".into()));
        }
        let mut maxcode = [-1i32; 17];
        let mut valptr = [0i32; 17];
        let mut mincode = [0i32; 17];
        let mut code = 0i32;
        let mut k = 0i32;
        for l in 1..=16 {
            let n = bits[l - 1] as i32;
            if n > 0 {
                valptr[l] = k;
                mincode[l] = code;
                code += n;
                k += n;
                maxcode[l] = code - 1;
            }
            code <<= 1;
        }
        Ok(Self {
            maxcode,
            valptr,
            mincode,
            values,
        })
    }
}

struct BitReader<'a> {
    data: &'a [u8],
    pos: usize,
    acc: u32,
    nbits: u32,
    hit_marker: bool,
}

impl<'a> BitReader<'a> {
    fn new(data: &'a [u8], pos: usize) -> Self {
        Self {
            data,
            pos,
            acc: 0,
            nbits: 0,
            hit_marker: false,
        }
    }

    fn bit(&mut self) -> Result<u32> {
        if self.nbits == 0 {
            let byte = if self.hit_marker {
                0
            } else {
                let b = *self.data.get(self.pos).ok_or(JpegError::Truncated)?;
                if b == 0xFF {
                    let next = *self.data.get(self.pos + 1).ok_or(JpegError::Truncated)?;
                    if next == 0x00 {
                        self.pos += 2;
                        0xFF
                    } else {
                        // a marker: feed zeros until the caller handles it
                        self.hit_marker = true;
                        0
                    }
                } else {
                    self.pos += 1;
                    b
                }
            };
            self.acc = byte as u32;
            self.nbits = 8;
        }
        self.nbits -= 1;
        Ok((self.acc >> self.nbits) & 1)
    }

    fn bits(&mut self, n: u32) -> Result<u32> {
        let mut v = 0;
        for _ in 0..n {
            v = (v << 1) | self.bit()?;
        }
        Ok(v)
    }

    fn decode(&mut self, t: &HuffmanTable) -> Result<u8> {
        let mut code = 0i32;
        for l in 1..=16 {
            code = (code << 1) | self.bit()? as i32;
            if t.maxcode[l] >= 0 && code <= t.maxcode[l] && code >= t.mincode[l] {
                let idx = (t.valptr[l] + code - t.mincode[l]) as usize;
                return t
                    .values
                    .get(idx)
                    .copied()
                    .ok_or_else(|| JpegError::Malformed("Huffman index".into()));
            }
        }
        Err(JpegError::Malformed("invalid Huffman code".into()))
    }

    /// Skips to the expected RSTn marker and resets the bit buffer.
    fn restart(&mut self) -> Result<()> {
        self.nbits = 0;
        self.hit_marker = false;
        while self.pos + 1 < self.data.len() {
            if self.data[self.pos] == 0xFF && (0xD0..=0xD7).contains(&self.data[self.pos + 1]) {
                self.pos += 2;
                return Ok(());
            }
            self.pos += 1;
        }
        Err(JpegError::Truncated)
    }
}

fn extend(v: u32, cat: u32) -> i32 {
    if cat == 0 {
        0
    } else if v < (1 << (cat - 1)) {
        v as i32 - (1 << cat) as i32 + 1
    } else {
        v as i32
    }
}

#[derive(Clone, Debug)]
struct Component {
    id: u8,
    h: usize,
    v: usize,
    tq: usize,
    td: usize,
    ta: usize,
    blocks_w: usize,
    blocks_h: usize,
    samples: Vec<u8>,
}

fn be16(data: &[u8], pos: usize) -> Result<usize> {
    match data.get(pos..pos + 2) {
        Some(b) => Ok(u16::from_be_bytes([b[0], b[1]]) as usize),
        None => Err(JpegError::Truncated),
    }
}

pub fn decode(data: &[u8]) -> Result<DecodedImage> {
    if data.len() < 2 || data[0] != 0xFF || data[1] != 0xD8 {
        return Err(JpegError::NotJpeg);
    }
    let mut pos = 2;
    let mut qt: [Option<[u16; 64]>; 4] = [None; 4];
    let mut dc_tables: [Option<HuffmanTable>; 4] = Default::default();
    let mut ac_tables: [Option<HuffmanTable>; 4] = Default::default();
    let mut frame: Option<(usize, usize, Vec<Component>)> = None;
    let mut restart_interval = 0usize;
    let basis = dct_basis();

    loop {
        while data.get(pos) == Some(&0xFF) && data.get(pos + 1) == Some(&0xFF) {
            pos += 1;
        }
        if pos + 1 >= data.len() {
            return Err(JpegError::Truncated);
        }
        if data[pos] != 0xFF {
            return Err(JpegError::Malformed(format!("expected marker at byte {pos}")));
        }
        let marker = data[pos + 1];
        pos += 2;
        match marker {
            0xD9 => return Err(JpegError::Malformed("EOI before any scan".into())),
            0xC0 | 0xC1 => {
                let len = be16(data, pos)?;
                let seg = data.get(pos + 2..pos + len).ok_or(JpegError::Truncated)?;
                if seg.len() < 6 || seg[0] != 8 {
                    return Err(JpegError::Unsupported("sample precision other than 8".into()));
                }
                let height = u16::from_be_bytes([seg[1], seg[2]]) as usize;
                let width = u16::from_be_bytes([seg[3], seg[4]]) as usize;
                let n = seg[5] as usize;
                if n != 1 && n != 3 {
                    return Err(JpegError::Unsupported(format!("{n} components")));
                }
                if height == 0 || width == 0 || seg.len() < 6 + 3 * n {
                    return Err(JpegError::Malformed("bad frame header".into()));
                }
                let mut comps = Vec::new();
                for i in 0..n {
                    let c = &seg[6 + 3 * i..9 + 3 * i];
                    let (h, v) = ((c[1] >> 4) as usize, (c[1] & 15) as usize);
                    if !(1..=4).contains(&h) || !(1..=4).contains(&v) || c[2] > 3 {
                        return Err(JpegError::Malformed("bad sampling factors".into()));
                    }
                    comps.push(Component {
                        id: c[0],
                        h,
                        v,
                        tq: c[2] as usize,
                        td: 0,
                        ta: 0,
                        blocks_w: 0,
                        blocks_h: 0,
                        samples: Vec::new(),
                    });
                }
                frame = Some((width, height, comps));
                pos += len;
            }
            0xC2..=0xCF if marker != 0xC4 && marker != 0xC8 && marker != 0xCC => {
                return Err(JpegError::Unsupported(format!("SOF marker 0x{marker:02X}")));
            }
            0xC4 => {
                let len = be16(data, pos)?;
                let seg = data.get(pos + 2..pos + len).ok_or(JpegError::Truncated)?;
                let mut i = 0;
                while i < seg.len() {
                    let class = seg[i] >> 4;
                    let id = (seg[i] & 15) as usize;
                    let bits: [u8; 16] = seg
                        .get(i + 1..i + 17)
                        .ok_or(JpegError::Truncated)?
                        .try_into()
                        .expect("16 bytes");
                    let count: usize = bits.iter().map(|&b| b as usize).sum();
                    let values = seg.get(i + 17..i + 17 + count).ok_or(JpegError::Truncated)?.to_vec();
                    if id > 3 || class > 1 {
                        return Err(JpegError::Malformed("bad Huffman table id".into()));
                    }
                    let table = HuffmanTable::new(&bits, values)?;
                    if class == 0 {
                        dc_tables[id] = Some(table);
                    } else {
                        ac_tables[id] = Some(table);
                    }
                    i += 17 + count;
                }
                pos += len;
            }
            0xDB => {
                let len = be16(data, pos)?;
                let seg = data.get(pos + 2..pos + len).ok_or(JpegError::Truncated)?;
                let mut i = 0;
                while i < seg.len() {
                    let precision = seg[i] >> 4;
                    let id = (seg[i] & 15) as usize;
                    if id > 3 {
                        return Err(JpegError::Malformed("bad quant table id".into()));
                    }
                    let mut table = [0u16; 64];
                    if precision == 0 {
                        let raw = seg.get(i + 1..i + 65).ok_or(JpegError::Truncated)?;
                        for (k, &z) in ZIGZAG.iter().enumerate() {
                            table[z] = raw[k] as u16;
                        }
                        i += 65;
                    } else {
                        let raw = seg.get(i + 1..i + 129).ok_or(JpegError::Truncated)?;
                        for (k, &z) in ZIGZAG.iter().enumerate() {
                            table[z] = u16::from_be_bytes([raw[2 * k], raw[2 * k + 1]]);
                        }
                        i += 129;
                    }
                    qt[id] = Some(table);
                }
                pos += len;
            }
            0xDD => {
                restart_interval = be16(data, pos + 2)?;
                pos += be16(data, pos)?;
            }
            0xDA => {
                let len = be16(data, pos)?;
                let seg = data.get(pos + 2..pos + len).ok_or(JpegError::Truncated)?;
                let (width, height, mut comps) =
                    frame.take().ok_or_else(|| JpegError::Malformed("SOS before SOF".into()))?;
                let ns = *seg.first().ok_or(JpegError::Truncated)? as usize;
                if ns != comps.len() {
                    return Err(JpegError::Unsupported("multi-scan images".into()));
                }
                for i in 0..ns {
                    let (cid, tables) = (seg[1 + 2 * i], seg[2 + 2 * i]);
                    let comp = comps
                        .iter_mut()
                        .find(|c| c.id == cid)
                        .ok_or_else(|| JpegError::Malformed("scan names unknown component".into()))?;
                    comp.td = (tables >> 4) as usize;
                    comp.ta = (tables & 15) as usize;
                }
                pos += len;
                return decode_scan(
                    data,
                    pos,
                    width,
                    height,
                    comps,
                    &qt,
                    &dc_tables,
                    &ac_tables,
                    restart_interval,
                    &basis,
                );
            }
            0xD0..=0xD7 | 0x01 => {}
            _ => {
                // APPn, COM and anything else with a length we can skip
                pos += be16(data, pos)?;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn decode_scan(
    data: &[u8],
    pos: usize,
    width: usize,
    height: usize,
    mut comps: Vec<Component>,
    qt: &[Option<[u16; 64]>; 4],
    dc_tables: &[Option<HuffmanTable>; 4],
    ac_tables: &[Option<HuffmanTable>; 4],
    restart_interval: usize,
    basis: &[[f64; 8]; 8],
) -> Result<DecodedImage> {
    let hmax = comps.iter().map(|c| c.h).max().unwrap_or(1);
    let vmax = comps.iter().map(|c| c.v).max().unwrap_or(1);
    let single = comps.len() == 1;
    let (mcu_x, mcu_y) = if single {
        (width.div_ceil(8), height.div_ceil(8))
    } else {
        (width.div_ceil(8 * hmax), height.div_ceil(8 * vmax))
    };
    for c in &mut comps {
        if single {
            c.h = 1;
            c.v = 1;
        }
        c.blocks_w = mcu_x * c.h;
        c.blocks_h = mcu_y * c.v;
        c.samples = vec![0; c.blocks_w * 8 * c.blocks_h * 8];
        if qt[c.tq].is_none() || dc_tables[c.td].is_none() || ac_tables[c.ta].is_none() {
            return Err(JpegError::Malformed("scan references a missing table".into()));
        }
    }
    let mut reader = BitReader::new(data, pos);
    let mut preds = vec![0i32; comps.len()];
    let total = mcu_x * mcu_y;
    for mcu in 0..total {
        if restart_interval > 0 && mcu > 0 && mcu % restart_interval == 0 {
            reader.restart()?;
            preds.iter_mut().for_each(|p| *p = 0);
        }
        let (mx, my) = (mcu % mcu_x, mcu / mcu_x);
        for (ci, c) in comps.iter_mut().enumerate() {
            let q = qt[c.tq].as_ref().expect("checked");
            let dc = dc_tables[c.td].as_ref().expect("checked");
            let ac = ac_tables[c.ta].as_ref().expect("checked");
            for by in 0..c.v {
                for bx in 0..c.h {
                    let mut coef = [0.0f64; 64];
                    let cat = reader.decode(dc)? as u32;
                    if cat > 11 {
                        return Err(JpegError::Malformed("DC category".into()));
                    }
                    let diff = extend(reader.bits(cat)?, cat);
                    preds[ci] += diff;
                    coef[0] = (preds[ci] * q[0] as i32) as f64;
                    let mut k = 1;
                    while k < 64 {
                        let sym = reader.decode(ac)?;
                        let (run, size) = ((sym >> 4) as usize, (sym & 15) as u32);
                        if size == 0 {
                            if run == 15 {
                                k += 16;
                                continue;
                            }
                            break;
                        }
                        k += run;
                        if k > 63 {
                            return Err(JpegError::Malformed("AC run past block end".into()));
                        }
                        let v = extend(reader.bits(size)?, size);
                        coef[ZIGZAG[k]] = (v * q[ZIGZAG[k]] as i32) as f64;
                        k += 1;
                    }
                    let pixels = idct(&coef, basis);
                    let (row0, col0) = ((my * c.v + by) * 8, (mx * c.h + bx) * 8);
                    let stride = c.blocks_w * 8;
                    for y in 0..8 {
                        for x in 0..8 {
                            let v = (pixels[y * 8 + x] + 128.0).round().clamp(0.0, 255.0) as u8;
                            c.samples[(row0 + y) * stride + col0 + x] = v;
                        }
                    }
                }
            }
        }
    }

    let mut rgb = vec![0u8; width * height * 3];
    let sample = |c: &Component, y: usize, x: usize| -> f64 {
        let (sy, sx) = if single {
            (y, x)
        } else {
            (y * c.v / vmax, x * c.h / hmax)
        };
        c.samples[sy * c.blocks_w * 8 + sx] as f64
    };
    for y in 0..height {
        for x in 0..width {
            let p = (y * width + x) * 3;
            if single {
                let v = sample(&comps[0], y, x) as u8;
                rgb[p..p + 3].copy_from_slice(&[v, v, v]);
                continue;
            }
            let (yy, cb, cr) = (
                sample(&comps[0], y, x),
                sample(&comps[1], y, x) - 128.0,
                sample(&comps[2], y, x) - 128.0,
            );
            let to8 = |v: f64| v.round().clamp(0.0, 255.0) as u8;
            rgb[p] = to8(yy + 1.402 * cr);
            rgb[p + 1] = to8(yy - 0.344136 * cb - 0.714136 * cr);
            rgb[p + 2] = to8(yy + 1.772 * cb);
        }
    }
    Ok(DecodedImage { width, height, rgb })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrupt::fixture::fixture_image;

    fn mae(a: &[u8], b: &[u8]) -> f64 {
        a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).abs()).sum::<f64>() / a.len() as f64
    }

    #[test]
    fn dct_round_trip_is_lossless_in_float() {
        let basis = dct_basis();
        let mut block = [0.0; 64];
        for (i, v) in block.iter_mut().enumerate() {
            *v = ((i * 37) % 255) as f64 - 128.0;
        }
        let back = idct(&fdct(&block, &basis), &basis);
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn quality_scaling_matches_ijg() {
        assert_eq!(scaled_quant_table(&LUMA_QUANT, 50), LUMA_QUANT);
        assert!(scaled_quant_table(&LUMA_QUANT, 100).iter().all(|&v| v == 1));
        assert_eq!(scaled_quant_table(&LUMA_QUANT, 25)[0], 32);
    }

    #[test]
    fn stream_structure() {
        let img = fixture_image(32, 32).to_rgb8();
        let bytes = encode_rgb(&img, 32, 32, 75);
        assert_eq!(&bytes[..2], &[0xFF, 0xD8]);
        assert_eq!(&bytes[bytes.len() - 2..], &[0xFF, 0xD9]);
        assert_eq!(&bytes[6..11], b"JFIF\0");
    }

    #[test]
    fn high_quality_is_nearly_lossless() {
        let img = fixture_image(32, 32).to_rgb8();
        let out = decode(&encode_rgb(&img, 32, 32, 100)).unwrap();
        assert_eq!((out.width, out.height), (32, 32));
        // the fixture has saturated colour edges, so 4:2:0 chroma costs a few levels
        assert!(mae(&img, &out.rgb) < 7.0, "{}", mae(&img, &out.rgb));
    }

    #[test]
    fn smooth_gradient_survives_high_quality() {
        let img: Vec<u8> = (0..32 * 32)
            .flat_map(|i| {
                let (y, x) = (i / 32, i % 32);
                [(x * 8) as u8, (y * 8) as u8, 128]
            })
            .collect();
        let out = decode(&encode_rgb(&img, 32, 32, 100)).unwrap();
        assert!(mae(&img, &out.rgb) < 3.0, "{}", mae(&img, &out.rgb));
    }

    #[test]
    fn odd_sizes_round_trip() {
        let img = fixture_image(19, 23).to_rgb8();
        let out = decode(&encode_rgb(&img, 23, 19, 90)).unwrap();
        assert_eq!((out.width, out.height), (23, 19));
        assert!(mae(&img, &out.rgb) < 10.0, "{}", mae(&img, &out.rgb));
    }

    #[test]
    fn error_shrinks_as_quality_rises() {
        let img = fixture_image(32, 32).to_rgb8();
        let errs: Vec<f64> = [40u8, 50, 58, 65, 80]
            .iter()
            .map(|&q| mae(&img, &decode(&encode_rgb(&img, 32, 32, q)).unwrap().rgb))
            .collect();
        assert!(errs[0] > 0.0);
        assert!(errs.windows(2).all(|w| w[0] > w[1]), "{errs:?}");
    }

    #[test]
    fn truncated_and_foreign_streams_fail() {
        let img = fixture_image(16, 16).to_rgb8();
        let bytes = encode_rgb(&img, 16, 16, 70);
        assert_eq!(decode(b"PNG"), Err(JpegError::NotJpeg));
        assert!(decode(&bytes[..bytes.len() / 3]).is_err());
    }

    #[test]
    fn restart_markers_are_honoured() {
        // Re-emit the stream with DRI=1 by hand: encode 16x32 (2 MCUs) and
        // splice in a restart marker between the two MCUs is not possible
        // without re-encoding, so encode each MCU separately instead.
        let img = fixture_image(16, 32).to_rgb8();
        let plain = decode(&encode_rgb(&img, 32, 16, 80)).unwrap();
        let left: Vec<u8> = (0..16).flat_map(|y| img[y * 96..y * 96 + 48].to_vec()).collect();
        let right: Vec<u8> = (0..16).flat_map(|y| img[y * 96 + 48..y * 96 + 96].to_vec()).collect();
        let a = encode_rgb(&left, 16, 16, 80);
        let b = encode_rgb(&right, 16, 16, 80);
        let scan = |s: &[u8]| -> (usize, usize) {
            let sos = s.windows(2).position(|w| w == [0xFF, 0xDA]).unwrap();
            let start = sos + 2 + be16(s, sos + 2).unwrap();
            (start, s.len() - 2)
        };
        let (sa, ea) = scan(&a);
        let (sb, eb) = scan(&b);
        let mut spliced = encode_rgb(&img, 32, 16, 80);
        let (s0, _) = scan(&spliced);
        spliced.truncate(s0);
        // DRI must precede SOS; rebuild the header with it inserted
        let sos = spliced.windows(2).position(|w| w == [0xFF, 0xDA]).unwrap();
        let mut header = spliced[..sos].to_vec();
        header.extend_from_slice(&[0xFF, 0xDD, 0x00, 0x04, 0x00, 0x01]);
        header.extend_from_slice(&spliced[sos..]);
        header.extend_from_slice(&a[sa..ea]);
        header.extend_from_slice(&[0xFF, 0xD0]);
        header.extend_from_slice(&b[sb..eb]);
        header.extend_from_slice(&[0xFF, 0xD9]);
        let restarted = decode(&header).unwrap();
        assert_eq!((restarted.width, restarted.height), (32, 16));
        // each half was coded independently, so it must match its own decode
        let da = decode(&a).unwrap();
        for y in 0..16 {
            assert_eq!(&restarted.rgb[y * 96..y * 96 + 48], &da.rgb[y * 48..(y + 1) * 48]);
        }
        assert!(mae(&plain.rgb, &restarted.rgb) < 4.0);
    }
}

