//! On-disk formats: a little-endian binary container for tensors ("FTNS"),
//! a named-entry container for full parameter sets ("FPRM"), JSON routing
//! traces, and DOT rendering of the active-edge graph. Binary round-trips
//! are bit-exact in the 64-bit dtype; every decode error names the byte
//! offset it tripped on. Files are written atomically (temp + rename).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HanError, Result};
use crate::han::{HanConfig, HanParams, LayerParams, RoutingTrace, UNITS};
use crate::router::RouterParams;
use crate::tensor::Tensor;
use crate::units::{CeuParams, CmeuParams, SeuParams};

const TENSOR_MAGIC: &[u8; 4] = b"FTNS";
const PARAMS_MAGIC: &[u8; 4] = b"FPRM";
const VERSION: u8 = 1;
const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

// ---------------------------------------------------------------- writing

/// Write bytes to `path` through a temporary sibling and a rename, so a
/// reader never observes a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{stem}.tmp{}", std::process::id()));
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        HanError::Io(e)
    })
}

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Encode one tensor in the 64-bit dtype.
pub fn tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    encode_tensor(t, DTYPE_F64)
}

/// Encode one tensor in the 32-bit exchange dtype (lossy).
pub fn tensor_to_bytes_f32(t: &Tensor) -> Vec<u8> {
    encode_tensor(t, DTYPE_F32)
}

fn encode_tensor(t: &Tensor, dtype: u8) -> Vec<u8> {
    let elem = if dtype == DTYPE_F64 { 8 } else { 4 };
    let mut buf = Vec::with_capacity(7 + 4 * t.rank() + elem * t.numel());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(VERSION);
    buf.push(dtype);
    buf.push(t.rank() as u8);
    for &d in t.dims() {
        push_u32(&mut buf, d as u32);
    }
    for &v in t.data() {
        if dtype == DTYPE_F64 {
            buf.extend_from_slice(&v.to_le_bytes());
        } else {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &tensor_to_bytes(t))
}

pub fn write_tensor_f32(path: &Path, t: &Tensor) -> Result<()> {
    atomic_write(path, &tensor_to_bytes_f32(t))
}

// ---------------------------------------------------------------- reading

/// Byte cursor that reports the offset of whatever it chokes on.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn fail<T>(&self, at: usize, message: String) -> Result<T> {
        Err(HanError::Format { offset: at, message })
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return self.fail(
                self.buf.len(),
                format!("truncated while reading {what}: wanted {n} bytes at offset {}", self.pos),
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let at = self.pos;
        let got = self.take(4, "magic")?;
        if got != magic {
            return self.fail(at, format!("bad magic {:?}, expected {:?}", got, magic));
        }
        let at = self.pos;
        let version = self.u8("version")?;
        if version != VERSION {
            return self.fail(at, format!("unsupported version {version}, expected {VERSION}"));
        }
        Ok(())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.expect_magic(TENSOR_MAGIC)?;
        let at = self.pos;
        let dtype = self.u8("dtype")?;
        if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
            return self.fail(at, format!("unknown dtype {dtype}"));
        }
        let at = self.pos;
        let rank = self.u8("rank")? as usize;
        if rank == 0 || rank > 3 {
            return self.fail(at, format!("rank {rank} outside supported range 1..=3"));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let at = self.pos;
            let d = self.u32(&format!("dim {i}"))? as usize;
            if d == 0 {
                return self.fail(at, format!("dimension {i} is zero"));
            }
            dims.push(d);
        }
        let numel: usize = dims.iter().product();
        let mut data = Vec::with_capacity(numel);
        if dtype == DTYPE_F64 {
            let payload = self.take(8 * numel, "payload")?;
            for chunk in payload.chunks_exact(8) {
                data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
            }
        } else {
            let payload = self.take(4 * numel, "payload")?;
            for chunk in payload.chunks_exact(4) {
                data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
            }
        }
        Tensor::new(dims, data).map_err(|e| HanError::Format {
            offset: self.pos,
            message: format!("decoded tensor rejected: {e}"),
        })
    }

    fn done(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return self.fail(
                self.pos,
                format!("{} trailing bytes after the payload", self.buf.len() - self.pos),
            );
        }
        Ok(())
    }
}

/// Decode one tensor, requiring the buffer to hold nothing else.
pub fn tensor_from_bytes(bytes: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(bytes);
    let t = r.tensor()?;
    r.done()?;
    Ok(t)
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    tensor_from_bytes(&fs::read(path)?)
}

// ------------------------------------------------------------- parameters

/// Encode a full parameter set as named entries in canonical order.
pub fn params_to_bytes(params: &HanParams) -> Vec<u8> {
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    params.for_each_entry(|name, dims, data| {
        entries.push((name.to_string(), dims.to_vec(), data.to_vec()));
    });
    let mut buf = Vec::new();
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.push(VERSION);
    push_u32(&mut buf, entries.len() as u32);
    for (name, dims, data) in entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        let t = Tensor::new(dims, data).expect("entry dims are valid");
        buf.extend_from_slice(&tensor_to_bytes(&t));
    }
    buf
}

pub fn write_params(path: &Path, params: &HanParams) -> Result<()> {
    atomic_write(path, &params_to_bytes(params))
}

/// Per-layer entry names, in canonical order.
fn layer_entry_names(l: usize) -> Vec<String> {
    let mut names = vec![
        format!("layer{l}.seu_rgb.gamma"),
        format!("layer{l}.seu_rgb.beta"),
        format!("layer{l}.seu_tir.gamma"),
        format!("layer{l}.seu_tir.beta"),
        format!("layer{l}.ceu_rgb.w"),
        format!("layer{l}.ceu_tir.w"),
    ];
    for unit in ["cmeu_r2t", "cmeu_t2r"] {
        for field in ["norm_scale", "norm_shift", "wq", "wk", "wv", "wo"] {
            names.push(format!("layer{l}.{unit}.{field}"));
        }
    }
    for j in 0..UNITS {
        for field in ["w1", "b1", "w2", "b2"] {
            names.push(format!("layer{l}.router{j}.{field}"));
        }
    }
    names
}

fn entry_format_err(offset: usize, message: String) -> HanError {
    HanError::Format { offset, message }
}

fn take_vec(
    map: &mut BTreeMap<String, (usize, Tensor)>,
    name: &str,
    want_len: Option<usize>,
) -> Result<Vec<f64>> {
    let (offset, t) = map
        .remove(name)
        .ok_or_else(|| entry_format_err(0, format!("missing entry {name}")))?;
    if t.rank() != 1 {
        return Err(entry_format_err(offset, format!("{name}: expected rank 1, got {}", t.rank())));
    }
    if let Some(n) = want_len {
        if t.numel() != n {
            return Err(entry_format_err(
                offset,
                format!("{name}: expected length {n}, got {}", t.numel()),
            ));
        }
    }
    Ok(t.data().to_vec())
}

fn take_matrix(
    map: &mut BTreeMap<String, (usize, Tensor)>,
    name: &str,
    want_dims: Option<[usize; 2]>,
) -> Result<Tensor> {
    let (offset, t) = map
        .remove(name)
        .ok_or_else(|| entry_format_err(0, format!("missing entry {name}")))?;
    if t.rank() != 2 {
        return Err(entry_format_err(offset, format!("{name}: expected rank 2, got {}", t.rank())));
    }
    if let Some(d) = want_dims {
        if t.dims() != d {
            return Err(entry_format_err(
                offset,
                format!("{name}: expected dims {d:?}, got {:?}", t.dims()),
            ));
        }
    }
    Ok(t)
}

/// Decode a parameter set, requiring exactly the canonical entry set for
/// some layer count and structurally identical layers.
pub fn params_from_bytes(bytes: &[u8]) -> Result<HanParams> {
    let mut r = Reader::new(bytes);
    r.expect_magic(PARAMS_MAGIC)?;
    let count = r.u32("entry count")? as usize;
    let mut map: BTreeMap<String, (usize, Tensor)> = BTreeMap::new();
    for i in 0..count {
        let entry_at = r.pos;
        let name_len = r.u16(&format!("entry {i} name length"))? as usize;
        let name_bytes = r.take(name_len, &format!("entry {i} name"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| entry_format_err(entry_at + 2, format!("entry {i} name is not UTF-8")))?
            .to_string();
        let t = r.tensor()?;
        if map.insert(name.clone(), (entry_at, t)).is_some() {
            return Err(entry_format_err(entry_at, format!("duplicate entry {name}")));
        }
    }
    r.done()?;

    // Layer count: contiguous layer{l}. prefixes starting at 0.
    let mut layers = 0;
    while map.keys().any(|k| k.starts_with(&format!("layer{layers}."))) {
        layers += 1;
    }
    if layers == 0 {
        return Err(entry_format_err(bytes.len(), "no layer entries present".into()));
    }

    // Structure is dictated by layer 0; later layers must match it.
    let g = map
        .get("layer0.seu_rgb.gamma")
        .ok_or_else(|| entry_format_err(bytes.len(), "missing entry layer0.seu_rgb.gamma".into()))?
        .1
        .numel();
    let k = map
        .get("layer0.ceu_rgb.w")
        .ok_or_else(|| entry_format_err(bytes.len(), "missing entry layer0.ceu_rgb.w".into()))?
        .1
        .numel();
    let c = map
        .get("layer0.cmeu_r2t.norm_scale")
        .ok_or_else(|| {
            entry_format_err(bytes.len(), "missing entry layer0.cmeu_r2t.norm_scale".into())
        })?
        .1
        .numel();
    let inner = {
        let (offset, wq) = map.get("layer0.cmeu_r2t.wq").ok_or_else(|| {
            entry_format_err(bytes.len(), "missing entry layer0.cmeu_r2t.wq".into())
        })?;
        if wq.rank() != 2 || wq.dims()[0] != c {
            return Err(entry_format_err(
                *offset,
                format!("layer0.cmeu_r2t.wq: expected dims [{c}, inner], got {:?}", wq.dims()),
            ));
        }
        wq.dims()[1]
    };
    let hidden = map
        .get("layer0.router0.b1")
        .ok_or_else(|| entry_format_err(bytes.len(), "missing entry layer0.router0.b1".into()))?
        .1
        .numel();

    let mut out_layers = Vec::with_capacity(layers);
    for l in 0..layers {
        let seu_rgb = SeuParams {
            gamma: take_vec(&mut map, &format!("layer{l}.seu_rgb.gamma"), Some(g))?,
            beta: take_vec(&mut map, &format!("layer{l}.seu_rgb.beta"), Some(g))?,
        };
        let seu_tir = SeuParams {
            gamma: take_vec(&mut map, &format!("layer{l}.seu_tir.gamma"), Some(g))?,
            beta: take_vec(&mut map, &format!("layer{l}.seu_tir.beta"), Some(g))?,
        };
        let ceu_rgb = CeuParams { w: take_vec(&mut map, &format!("layer{l}.ceu_rgb.w"), Some(k))? };
        let ceu_tir = CeuParams { w: take_vec(&mut map, &format!("layer{l}.ceu_tir.w"), Some(k))? };
        let mut cmeus = Vec::with_capacity(2);
        for unit in ["cmeu_r2t", "cmeu_t2r"] {
            cmeus.push(CmeuParams {
                norm_scale: take_vec(&mut map, &format!("layer{l}.{unit}.norm_scale"), Some(c))?,
                norm_shift: take_vec(&mut map, &format!("layer{l}.{unit}.norm_shift"), Some(c))?,
                wq: take_matrix(&mut map, &format!("layer{l}.{unit}.wq"), Some([c, inner]))?,
                wk: take_matrix(&mut map, &format!("layer{l}.{unit}.wk"), Some([c, inner]))?,
                wv: take_matrix(&mut map, &format!("layer{l}.{unit}.wv"), Some([c, inner]))?,
                wo: take_matrix(&mut map, &format!("layer{l}.{unit}.wo"), Some([inner, c]))?,
            });
        }
        let cmeu_t2r = cmeus.pop().unwrap();
        let cmeu_r2t = cmeus.pop().unwrap();
        let mut routers = Vec::with_capacity(UNITS);
        for j in 0..UNITS {
            routers.push(RouterParams {
                w1: take_matrix(&mut map, &format!("layer{l}.router{j}.w1"), Some([4 * c, hidden]))?,
                b1: take_vec(&mut map, &format!("layer{l}.router{j}.b1"), Some(hidden))?,
                w2: take_matrix(&mut map, &format!("layer{l}.router{j}.w2"), Some([hidden, UNITS]))?,
                b2: take_vec(&mut map, &format!("layer{l}.router{j}.b2"), Some(UNITS))?,
            });
        }
        out_layers.push(LayerParams {
            seu_rgb,
            seu_tir,
            ceu_rgb,
            ceu_tir,
            cmeu_r2t,
            cmeu_t2r,
            routers,
        });
    }
    if let Some((name, (offset, _))) = map.iter().next() {
        return Err(entry_format_err(*offset, format!("unexpected entry {name}")));
    }
    debug_assert_eq!(layer_entry_names(0).len(), 34);
    Ok(HanParams { layers: out_layers })
}

pub fn read_params(path: &Path) -> Result<HanParams> {
    params_from_bytes(&fs::read(path)?)
}

// ------------------------------------------------------------------ trace

/// Serialized routing record: the config that produced it plus one trace
/// per processed frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub config: HanConfig,
    pub frames: Vec<RoutingTrace>,
}

pub fn trace_to_json(trace: &TraceFile) -> Result<String> {
    Ok(serde_json::to_string_pretty(trace)?)
}

pub fn trace_from_json(text: &str) -> Result<TraceFile> {
    let file: TraceFile = serde_json::from_str(text)?;
    file.config.validate()?;
    for (idx, frame) in file.frames.iter().enumerate() {
        if frame.gates.layers() != file.config.layers {
            return Err(HanError::Parse(format!(
                "frame {idx}: gate tensor has {} layers, config declares {}",
                frame.gates.layers(),
                file.config.layers
            )));
        }
        let expected = frame.gates.active_edges(frame.edge_threshold);
        if expected != frame.active_edges {
            return Err(HanError::Parse(format!(
                "frame {idx}: active_edges inconsistent with threshold {}",
                frame.edge_threshold
            )));
        }
        for layer in &frame.gates.gates {
            for row in layer {
                for &gate in row {
                    if !(0.0..1.0).contains(&gate) {
                        return Err(HanError::Parse(format!(
                            "frame {idx}: gate {gate} outside [0,1)"
                        )));
                    }
                }
            }
        }
    }
    Ok(file)
}

pub fn write_trace(path: &Path, trace: &TraceFile) -> Result<()> {
    atomic_write(path, trace_to_json(trace)?.as_bytes())
}

pub fn read_trace(path: &Path) -> Result<TraceFile> {
    trace_from_json(&String::from_utf8_lossy(&fs::read(path)?))
}

// -------------------------------------------------------------------- dot

const UNIT_LABELS: [&str; UNITS] = ["SEU", "CEU", "CMEU_r2t", "CMEU_t2r"];

/// Render one frame's active-edge graph as DOT text. Unit nodes are always
/// declared; the fusion-side sinks of last-layer edges only when referenced.
/// Ordering is fixed, so equal traces render byte-identically.
pub fn export_dot(trace: &TraceFile, frame: usize) -> Result<String> {
    let Some(rt) = trace.frames.get(frame) else {
        return Err(HanError::Config(format!(
            "frame {frame} out of range: trace holds {} frames",
            trace.frames.len()
        )));
    };
    let layers = trace.config.layers;
    let mut out = String::from("digraph fusion {\n  rankdir=LR;\n");
    for l in 0..layers {
        for i in 0..UNITS {
            out.push_str(&format!("  L{l}U{i} [label=\"{}\"];\n", UNIT_LABELS[i]));
        }
    }
    let mut sinks: Vec<usize> = rt
        .active_edges
        .iter()
        .filter(|e| e[0] + 1 == layers)
        .map(|e| e[2])
        .collect();
    sinks.sort_unstable();
    sinks.dedup();
    for i in sinks {
        out.push_str(&format!("  L{layers}U{i} [label=\"fusion\"];\n"));
    }
    for e in &rt.active_edges {
        let (l, j, i) = (e[0], e[1], e[2]);
        let gate = rt.gates.gates[l][j][i];
        out.push_str(&format!("  L{l}U{j} -> L{}U{i} [label=\"{gate:.2}\"];\n", l + 1));
    }
    out.push_str("}\n");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::han::{RouteTensor, DEFAULT_EDGE_THRESHOLD};
    use crate::rng::RngState;

    fn tmpdir() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn one_element_tensor_round_trips_bit_exactly() {
        let dir = tmpdir();
        let path = dir.path().join("x.ftns");
        let t = Tensor::new(vec![1], vec![42.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.dims(), t.dims());
        assert_eq!(back.data()[0].to_bits(), 42.0_f64.to_bits());
    }

    #[test]
    fn random_tensor_round_trip_is_byte_identical() {
        let mut rng = RngState::new(12);
        let data: Vec<f64> = (0..16 * 4 * 4).map(|_| rng.uniform(-1e6, 1e6)).collect();
        let t = Tensor::new(vec![16, 4, 4], data).unwrap();
        let bytes = tensor_to_bytes(&t);
        let again = tensor_to_bytes(&tensor_from_bytes(&bytes).unwrap());
        assert_eq!(bytes, again);
    }

    #[test]
    fn f32_dtype_reads_back_rounded() {
        let t = Tensor::new(vec![2], vec![1.0, 0.1]).unwrap();
        let bytes = tensor_to_bytes_f32(&t);
        assert_eq!(bytes[5], 0, "dtype byte");
        let back = tensor_from_bytes(&bytes).unwrap();
        assert_eq!(back.data()[0], 1.0);
        assert_eq!(back.data()[1], 0.1_f32 as f64);
    }

    #[test]
    fn decode_errors_carry_byte_offsets() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let good = tensor_to_bytes(&t);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        match tensor_from_bytes(&bad_magic) {
            Err(HanError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }

        let mut bad_dtype = good.clone();
        bad_dtype[5] = 9;
        match tensor_from_bytes(&bad_dtype) {
            Err(HanError::Format { offset, message }) => {
                assert_eq!(offset, 5);
                assert!(message.contains("dtype"));
            }
            other => panic!("expected format error, got {other:?}"),
        }

        let mut rank0 = good.clone();
        rank0[6] = 0;
        match tensor_from_bytes(&rank0) {
            Err(HanError::Format { offset, .. }) => assert_eq!(offset, 6),
            other => panic!("expected format error, got {other:?}"),
        }

        let truncated = &good[..good.len() - 3];
        match tensor_from_bytes(truncated) {
            Err(HanError::Format { offset, message }) => {
                assert_eq!(offset, truncated.len());
                assert!(message.contains("truncated"));
            }
            other => panic!("expected format error, got {other:?}"),
        }

        let mut trailing = good.clone();
        trailing.push(0);
        match tensor_from_bytes(&trailing) {
            Err(HanError::Format { offset, message }) => {
                assert_eq!(offset, good.len());
                assert!(message.contains("trailing"));
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn params_round_trip_preserves_every_entry() {
        let cfg = HanConfig { layers: 2, channels: 8, groups: 4, ..HanConfig::default() };
        let params = HanParams::init(&cfg).unwrap();
        let bytes = params_to_bytes(&params);
        let back = params_from_bytes(&bytes).unwrap();
        assert_eq!(back, params);
        assert_eq!(params_to_bytes(&back), bytes);

        let dir = tmpdir();
        let path = dir.path().join("p.fprm");
        write_params(&path, &params).unwrap();
        assert_eq!(read_params(&path).unwrap(), params);
    }

    #[test]
    fn corrupted_params_fail_with_offset() {
        let cfg = HanConfig { layers: 1, channels: 8, groups: 4, ..HanConfig::default() };
        let params = HanParams::init(&cfg).unwrap();
        let mut bytes = params_to_bytes(&params);
        bytes[0] = b'Z';
        assert!(matches!(
            params_from_bytes(&bytes),
            Err(HanError::Format { offset: 0, .. })
        ));
        let good = params_to_bytes(&params);
        let half = &good[..good.len() / 2];
        assert!(matches!(params_from_bytes(half), Err(HanError::Format { .. })));
    }

    #[test]
    fn foreign_and_missing_entries_are_rejected() {
        let cfg = HanConfig { layers: 1, channels: 8, groups: 4, ..HanConfig::default() };
        let params = HanParams::init(&cfg).unwrap();

        // Append a rogue entry past the canonical set.
        let mut bytes = params_to_bytes(&params);
        let name = b"layer0.rogue.x";
        let count_at = 5;
        let old_count = u32::from_le_bytes(bytes[count_at..count_at + 4].try_into().unwrap());
        bytes[count_at..count_at + 4].copy_from_slice(&(old_count + 1).to_le_bytes());
        bytes.extend_from_slice(&(name.len() as u16).to_le_bytes());
        bytes.extend_from_slice(name);
        bytes.extend_from_slice(&tensor_to_bytes(&Tensor::new(vec![1], vec![0.0]).unwrap()));
        match params_from_bytes(&bytes) {
            Err(HanError::Format { message, .. }) => assert!(message.contains("rogue")),
            other => panic!("expected format error, got {other:?}"),
        }

        // Drop the last entry: count points past the truncated set.
        let good = params_to_bytes(&params);
        let mut short = good.clone();
        short[count_at..count_at + 4].copy_from_slice(&(old_count - 1).to_le_bytes());
        // Removing the final entry's bytes: find its start by re-encoding
        // without it is fiddly; instead just declare one fewer and leave the
        // bytes — the reader must flag the trailing garbage.
        match params_from_bytes(&short) {
            Err(HanError::Format { message, .. }) => {
                assert!(message.contains("trailing") || message.contains("missing"))
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn trace_json_round_trips_and_validates() {
        let cfg = HanConfig { layers: 2, ..HanConfig::default() };
        let mut gates = RouteTensor::zeros(2);
        gates.gates[0][1][2] = 0.9;
        gates.gates[1][0][3] = 0.25;
        let trace = RoutingTrace::new(gates, Vec::new(), DEFAULT_EDGE_THRESHOLD);
        let file = TraceFile { config: cfg, frames: vec![trace] };
        let json = trace_to_json(&file).unwrap();
        let back = trace_from_json(&json).unwrap();
        assert_eq!(back, file);

        // Tamper with the edge list: consistency check must fire.
        let mut broken = file.clone();
        broken.frames[0].active_edges.clear();
        let json = trace_to_json(&broken).unwrap();
        assert!(matches!(trace_from_json(&json), Err(HanError::Parse(_))));

        let dir = tmpdir();
        let path = dir.path().join("t.json");
        write_trace(&path, &file).unwrap();
        assert_eq!(read_trace(&path).unwrap(), file);
    }

    #[test]
    fn dot_renders_nodes_edges_and_is_deterministic() {
        let cfg = HanConfig { layers: 1, ..HanConfig::default() };

        let silent = TraceFile {
            config: cfg.clone(),
            frames: vec![RoutingTrace::new(RouteTensor::zeros(1), Vec::new(), 0.1)],
        };
        let text = export_dot(&silent, 0).unwrap();
        assert_eq!(text.matches("[label=\"SEU\"]").count(), 1);
        assert_eq!(text.matches("label=").count(), UNITS, "4 nodes, no edges");
        assert!(!text.contains("->"));

        let mut gates = RouteTensor::zeros(1);
        gates.gates[0][1][2] = 0.9;
        let one_edge = TraceFile {
            config: cfg,
            frames: vec![RoutingTrace::new(gates, Vec::new(), 0.1)],
        };
        let text = export_dot(&one_edge, 0).unwrap();
        assert_eq!(text.matches("->").count(), 1);
        assert!(text.contains("L0U1 -> L1U2 [label=\"0.90\"];"));
        assert_eq!(text, export_dot(&one_edge, 0).unwrap());

        assert!(export_dot(&one_edge, 1).is_err());
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_temp() {
        let dir = tmpdir();
        let path = dir.path().join("out.bin");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        let names: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names, vec!["out.bin"]);
    }
}
