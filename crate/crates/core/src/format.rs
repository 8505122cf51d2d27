//! On-disk formats: the binary feature container, the parameter file built
//! from it, the per-patch assignment CSV and the text training report.
//!
//! Feature file layout, all little-endian:
//!
//! ```text
//! magic "SSA1" | version u16 = 1 | rows u32 | cols u32 | rows·cols × f32
//! ```

use std::fmt::Write as _;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::aggregator::{Activation, SlotMlpParams, SlotRefiner};
use crate::error::{Error, Result};
use crate::model::{HeadParams, ModelConfig, ModelParams};
use crate::numerics::DenseMatrix;
use crate::router::{GateParams, RoutingTable};
use crate::scalar::Scalar;
use crate::trainer::{TrainReport, TrainStatus};

pub const FEATURE_MAGIC: [u8; 4] = *b"SSA1";
pub const FEATURE_VERSION: u16 = 1;
pub const HEADER_BYTES: usize = 14;

pub const PARAMS_MAGIC: [u8; 4] = *b"SSAP";
pub const PARAMS_VERSION: u16 = 1;

/// Header of a feature file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureHeader {
    pub rows: u32,
    pub cols: u32,
}

impl FeatureHeader {
    pub fn payload_bytes(&self) -> u64 {
        self.rows as u64 * self.cols as u64 * 4
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

/// Serializes `m` as a feature file. Narrowing to f32 rounds to nearest,
/// ties to even. Non-finite values are rejected before anything is written.
pub fn encode_features<T: Scalar>(m: &DenseMatrix<T>) -> Result<Vec<u8>> {
    if let Some(i) = m.as_slice().iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite value at row {}, col {}",
            i / m.cols().max(1),
            i % m.cols().max(1)
        )));
    }
    let mut out = Vec::with_capacity(HEADER_BYTES + 4 * m.as_slice().len());
    out.extend_from_slice(&FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(m.rows(), "row count")?.to_le_bytes());
    out.extend_from_slice(&to_u32(m.cols(), "column count")?.to_le_bytes());
    for &v in m.as_slice() {
        let narrowed = v.as_f64() as f32;
        if !narrowed.is_finite() {
            return Err(Error::InvalidInput(format!("value {v} overflows f32")));
        }
        out.extend_from_slice(&narrowed.to_le_bytes());
    }
    Ok(out)
}

fn parse_header(bytes: &[u8]) -> Result<FeatureHeader> {
    if bytes.len() < HEADER_BYTES {
        return Err(Error::Format(format!(
            "feature header needs {HEADER_BYTES} bytes, found {}",
            bytes.len()
        )));
    }
    if bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"SSA1\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FEATURE_VERSION {
        return Err(Error::Format(format!("unsupported feature file version {version}")));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    let cols = u32::from_le_bytes(bytes[10..14].try_into().expect("4 bytes"));
    Ok(FeatureHeader { rows, cols })
}

/// Parses one feature block at the start of `bytes`, returning the matrix
/// and the number of bytes consumed.
fn decode_block<T: Scalar>(bytes: &[u8]) -> Result<(DenseMatrix<T>, usize)> {
    let header = parse_header(bytes)?;
    let need = header.payload_bytes();
    let have = (bytes.len() - HEADER_BYTES) as u64;
    if have < need {
        return Err(Error::Corruption {
            expected: need,
            actual: have,
        });
    }
    let payload = &bytes[HEADER_BYTES..HEADER_BYTES + need as usize];
    let data: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::c(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
        .collect();
    let m = DenseMatrix::new(header.rows as usize, header.cols as usize, data)
        .map_err(|e| Error::Format(format!("feature payload rejected: {e}")))?;
    Ok((m, HEADER_BYTES + need as usize))
}

/// Parses a complete feature file. Trailing bytes past the declared payload
/// are a corruption error, as is a short payload.
pub fn decode_features<T: Scalar>(bytes: &[u8]) -> Result<DenseMatrix<T>> {
    let header = parse_header(bytes)?;
    let have = (bytes.len() - HEADER_BYTES) as u64;
    if have != header.payload_bytes() {
        return Err(Error::Corruption {
            expected: header.payload_bytes(),
            actual: have,
        });
    }
    Ok(decode_block(bytes)?.0)
}

pub fn write_feature_file<T: Scalar>(path: impl AsRef<Path>, m: &DenseMatrix<T>) -> Result<()> {
    let bytes = encode_features(m)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_feature_file<T: Scalar>(path: impl AsRef<Path>) -> Result<DenseMatrix<T>> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_features(&bytes)
}

fn activation_code(a: Activation) -> f64 {
    match a {
        Activation::Gelu => 0.0,
        Activation::Identity => 1.0,
    }
}

fn activation_from_code(c: f64) -> Result<Activation> {
    match c as i64 {
        0 => Ok(Activation::Gelu),
        1 => Ok(Activation::Identity),
        other => Err(Error::Format(format!("unknown activation code {other}"))),
    }
}

fn config_row(cfg: &ModelConfig) -> Vec<f64> {
    vec![
        cfg.dim as f64,
        cfg.slots as f64,
        cfg.hidden as f64,
        cfg.out_dim as f64,
        cfg.classes as f64,
        activation_code(cfg.activation),
        f64::from(u8::from(cfg.residual)),
        f64::from(u8::from(cfg.per_slot_mlp)),
    ]
}

fn config_from_row(row: &[f64]) -> Result<ModelConfig> {
    if row.len() != 8 || row.iter().any(|v| v.fract() != 0.0 || *v < 0.0) {
        return Err(Error::Format("config section must hold 8 non-negative integers".into()));
    }
    let cfg = ModelConfig {
        dim: row[0] as usize,
        slots: row[1] as usize,
        hidden: row[2] as usize,
        out_dim: row[3] as usize,
        classes: row[4] as usize,
        activation: activation_from_code(row[5])?,
        residual: row[6] != 0.0,
        per_slot_mlp: row[7] != 0.0,
    };
    cfg.validate()
        .map_err(|e| Error::Format(format!("config section invalid: {e}")))?;
    Ok(cfg)
}

fn row_matrix<T: Scalar>(v: &[T]) -> Result<DenseMatrix<T>> {
    DenseMatrix::new(1, v.len(), v.to_vec())
}

fn named_tensors<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<(String, DenseMatrix<T>)>> {
    let mut out = vec![
        ("config".to_string(), row_matrix(&config_row(&params.config))?.cast()),
        ("gate.weight".to_string(), params.gate.weight.clone()),
    ];
    for (i, mlp) in params.refiner.mlps().iter().enumerate() {
        out.push((format!("mlp{i}.w1"), mlp.w1.clone()));
        out.push((format!("mlp{i}.b1"), row_matrix(&mlp.b1)?));
        out.push((format!("mlp{i}.w2"), mlp.w2.clone()));
        out.push((format!("mlp{i}.b2"), row_matrix(&mlp.b2)?));
    }
    out.push(("head.weight".to_string(), params.head.weight.clone()));
    out.push(("head.bias".to_string(), row_matrix(&params.head.bias)?));
    Ok(out)
}

/// Parameter file: `"SSAP" | version u16 | sections u32`, then per section
/// `name_len u16 | name utf-8 | feature block`. Values are stored as f32.
pub fn encode_params<T: Scalar>(params: &ModelParams<T>) -> Result<Vec<u8>> {
    let sections = named_tensors(params)?;
    let mut out = Vec::new();
    out.extend_from_slice(&PARAMS_MAGIC);
    out.extend_from_slice(&PARAMS_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(sections.len(), "section count")?.to_le_bytes());
    for (name, m) in &sections {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&encode_features(m)?);
    }
    Ok(out)
}

struct Sections<T> {
    entries: Vec<(String, DenseMatrix<T>)>,
    next: usize,
}

impl<T: Scalar> Sections<T> {
    fn take(&mut self, name: &str, rows: usize, cols: usize) -> Result<DenseMatrix<T>> {
        let (found, m) = self
            .entries
            .get(self.next)
            .ok_or_else(|| Error::Format(format!("missing section {name}")))?;
        if found != name {
            return Err(Error::Format(format!("expected section {name}, found {found}")));
        }
        if m.shape() != (rows, cols) {
            return Err(Error::Format(format!(
                "section {name} has shape {:?}, expected {:?}",
                m.shape(),
                (rows, cols)
            )));
        }
        self.next += 1;
        Ok(m.clone())
    }

    fn take_vec(&mut self, name: &str, len: usize) -> Result<Vec<T>> {
        Ok(self.take(name, 1, len)?.as_slice().to_vec())
    }
}

pub fn decode_params<T: Scalar>(bytes: &[u8]) -> Result<ModelParams<T>> {
    if bytes.len() < 10 {
        return Err(Error::Format("parameter file header truncated".into()));
    }
    if bytes[..4] != PARAMS_MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected \"SSAP\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != PARAMS_VERSION {
        return Err(Error::Format(format!("unsupported parameter file version {version}")));
    }
    let count = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let mut pos = 10;
    let mut entries = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len_bytes = bytes
            .get(pos..pos + 2)
            .ok_or_else(|| Error::Format("section name length truncated".into()))?;
        let name_len = u16::from_le_bytes([len_bytes[0], len_bytes[1]]) as usize;
        pos += 2;
        let name = bytes
            .get(pos..pos + name_len)
            .ok_or_else(|| Error::Format("section name truncated".into()))?;
        let name = String::from_utf8(name.to_vec()).map_err(|_| Error::Format("section name is not utf-8".into()))?;
        pos += name_len;
        let (m, used) = decode_block::<T>(&bytes[pos..])?;
        pos += used;
        entries.push((name, m));
    }
    if pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last section",
            bytes.len() - pos
        )));
    }
    let cfg_row: Vec<f64> = match entries.first() {
        Some((n, m)) if n == "config" => m.as_slice().iter().map(|v| v.as_f64()).collect(),
        _ => return Err(Error::Format("first section must be config".into())),
    };
    let cfg = config_from_row(&cfg_row)?;
    let mut s = Sections { entries, next: 1 };
    let gate = GateParams::new(s.take("gate.weight", cfg.slots, cfg.dim)?)?;
    let n_mlps = if cfg.per_slot_mlp { cfg.slots } else { 1 };
    let mut mlps = Vec::with_capacity(n_mlps);
    for i in 0..n_mlps {
        mlps.push(SlotMlpParams::new(
            s.take(&format!("mlp{i}.w1"), cfg.dim, cfg.hidden)?,
            s.take_vec(&format!("mlp{i}.b1"), cfg.hidden)?,
            s.take(&format!("mlp{i}.w2"), cfg.hidden, cfg.out_dim)?,
            s.take_vec(&format!("mlp{i}.b2"), cfg.out_dim)?,
            cfg.activation,
        )?);
    }
    let refiner = if cfg.per_slot_mlp {
        SlotRefiner::PerSlot(mlps)
    } else {
        SlotRefiner::Shared(mlps.pop().expect("one shared mlp"))
    };
    let head = HeadParams {
        weight: s.take("head.weight", cfg.out_dim, cfg.classes)?,
        bias: s.take_vec("head.bias", cfg.classes)?,
    };
    if s.next != s.entries.len() {
        return Err(Error::Format(format!("unexpected section {}", s.entries[s.next].0)));
    }
    Ok(ModelParams {
        config: cfg,
        gate,
        refiner,
        head,
    })
}

pub fn write_params_file<T: Scalar>(path: impl AsRef<Path>, params: &ModelParams<T>) -> Result<()> {
    fs::write(path, encode_params(params)?)?;
    Ok(())
}

pub fn read_params_file<T: Scalar>(path: impl AsRef<Path>) -> Result<ModelParams<T>> {
    decode_params(&fs::read(path)?)
}

/// CSV with one row per patch: index, then `slot_i,weight_i` for each of
/// the Top-k choices in descending weight order. Weights carry 9
/// significant digits.
pub fn write_assignments<T: Scalar>(out: &mut impl Write, table: &RoutingTable<T>) -> io::Result<()> {
    let mut header = String::from("patch_index");
    for i in 1..=table.top_k() {
        let _ = write!(header, ",slot_{i},weight_{i}");
    }
    writeln!(out, "{header}")?;
    let mut line = String::new();
    for j in 0..table.patches() {
        line.clear();
        let _ = write!(line, "{j}");
        for (s, w) in table.slots_of(j).iter().zip(table.weights_of(j)) {
            let _ = write!(line, ",{s},{:.8e}", w.as_f64());
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// Line-oriented `key=value` rendering of a training run. Floats use the
/// shortest representation that round-trips, so equal runs render to
/// identical bytes.
pub fn format_train_report(report: &TrainReport) -> String {
    let c = &report.config;
    let m = &c.model;
    let k = &c.constants;
    let mut s = String::new();
    let _ = writeln!(s, "report_version=1");
    let _ = writeln!(
        s,
        "model dim={} slots={} hidden={} out_dim={} classes={} activation={} residual={} per_slot_mlp={}",
        m.dim,
        m.slots,
        m.hidden,
        m.out_dim,
        m.classes,
        m.activation.name(),
        m.residual,
        m.per_slot_mlp
    );
    let _ = writeln!(
        s,
        "train top_k={} epochs={} batch_size={} lr={:?} seed={}",
        c.top_k, c.epochs, c.batch_size, c.lr, c.seed
    );
    let _ = writeln!(
        s,
        "constants lambda={:?} entropy_coeff={:?} alpha={:?} epsilon={:?} delta={:?}",
        k.lambda, k.entropy_coeff, k.alpha, k.epsilon, k.delta
    );
    for r in &report.records {
        let _ = writeln!(
            s,
            "epoch={} total={:?} task={:?} switch={:?} entropy={:?} z={:?} train_accuracy={:?} val_accuracy={:?} max_load={:?} load={} mean_prob={}",
            r.epoch,
            r.loss.total,
            r.loss.task,
            r.loss.switch,
            r.loss.entropy,
            r.loss.z,
            r.train_accuracy,
            r.val_accuracy,
            r.max_load,
            join(&r.load_fraction),
            join(&r.mean_prob)
        );
    }
    match report.status {
        TrainStatus::Completed => {
            let _ = writeln!(s, "status=completed");
        }
        TrainStatus::Diverged { epoch } => {
            let _ = writeln!(s, "status=diverged epoch={epoch}");
        }
    }
    let _ = writeln!(s, "test_accuracy={:?}", report.test_accuracy);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_sample, RngState};
    use crate::router::top_k_select;

    fn random(n: usize, d: usize, seed: u64) -> DenseMatrix<f64> {
        let data = gaussian_sample(&mut RngState::new(seed), n * d, 0.0, 1.0).unwrap();
        DenseMatrix::new(n, d, data).unwrap()
    }

    #[test]
    fn round_trip_after_one_narrowing() {
        let m = random(100, 16, 1);
        let back: DenseMatrix<f64> = decode_features(&encode_features(&m).unwrap()).unwrap();
        let expect = m.map(|v| (v as f32) as f64);
        assert_eq!(back, expect);
        let bytes = encode_features(&back).unwrap();
        assert_eq!(
            encode_features(&decode_features::<f64>(&bytes).unwrap()).unwrap(),
            bytes
        );
    }

    #[test]
    fn header_and_one_encoding() {
        let m = DenseMatrix::new(1, 2, vec![0.0f64, 1.0]).unwrap();
        let b = encode_features(&m).unwrap();
        assert_eq!(b.len(), HEADER_BYTES + 8);
        assert_eq!(&b[..14], &[b'S', b'S', b'A', b'1', 1, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&b[18..22], &[0x00, 0x00, 0x80, 0x3F]);
    }

    #[test]
    fn narrowing_rounds_half_to_even() {
        // 1 + 2^-24 sits exactly between 1 and the next f32; ties go to 1.0
        let tie = 1.0 + 2f64.powi(-24);
        let above = 1.0 + 3.0 * 2f64.powi(-24);
        let m = DenseMatrix::new(1, 2, vec![tie, above]).unwrap();
        let back: DenseMatrix<f64> = decode_features(&encode_features(&m).unwrap()).unwrap();
        assert_eq!(back.as_slice()[0], 1.0);
        assert_eq!(back.as_slice()[1], 1.0 + 4.0 * 2f64.powi(-24));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let mut b = encode_features(&random(2, 2, 0)).unwrap();
        b[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_features::<f64>(&b), Err(Error::Format(_))));
    }

    #[test]
    fn short_payload_names_both_sizes() {
        let mut b = Vec::new();
        b.extend_from_slice(b"SSA1");
        b.extend_from_slice(&1u16.to_le_bytes());
        b.extend_from_slice(&10u32.to_le_bytes());
        b.extend_from_slice(&4u32.to_le_bytes());
        b.extend(std::iter::repeat_n(0u8, 120));
        match decode_features::<f64>(&b) {
            Err(Error::Corruption { expected, actual }) => assert_eq!((expected, actual), (160, 120)),
            other => panic!("expected corruption, got {other:?}"),
        }
    }

    #[test]
    fn wrong_version_and_short_header() {
        let mut b = encode_features(&random(1, 1, 0)).unwrap();
        b[4] = 2;
        assert!(matches!(decode_features::<f64>(&b), Err(Error::Format(_))));
        assert!(matches!(decode_features::<f64>(&b[..9]), Err(Error::Format(_))));
    }

    #[test]
    fn nan_rejected_before_writing() {
        let dir = std::env::temp_dir().join(format!("slotagg-nan-{}", std::process::id()));
        let mut m = DenseMatrix::<f32>::zeros(2, 2);
        m.as_mut_slice()[3] = f32::NAN;
        assert!(matches!(encode_features(&m), Err(Error::InvalidInput(_))));
        assert!(write_feature_file(&dir, &m).is_err());
        assert!(!dir.exists());
    }

    #[test]
    fn params_round_trip() {
        for (per_slot, residual) in [(false, false), (true, true)] {
            let mut cfg = ModelConfig::new(4, 3, 2);
            cfg.per_slot_mlp = per_slot;
            cfg.residual = residual;
            let p = ModelParams::<f64>::init(&cfg, &mut RngState::new(5)).unwrap();
            let bytes = encode_params(&p).unwrap();
            let back: ModelParams<f64> = decode_params(&bytes).unwrap();
            assert_eq!(back.config, cfg);
            let narrowed: Vec<f64> = p.to_flat().iter().map(|&v| (v as f32) as f64).collect();
            assert_eq!(back.to_flat(), narrowed);
            assert_eq!(encode_params(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn params_reject_garbage() {
        let p = ModelParams::<f64>::init(&ModelConfig::new(2, 2, 2), &mut RngState::new(0)).unwrap();
        let bytes = encode_params(&p).unwrap();
        assert!(decode_params::<f64>(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode_params::<f64>(&extra), Err(Error::Format(_))));
        assert!(matches!(decode_params::<f64>(b"SSA1xxxxxxxx"), Err(Error::Format(_))));
    }

    #[test]
    fn assignment_csv_shape() {
        let probs = DenseMatrix::from_rows(&[vec![0.5, 0.3, 0.2], vec![0.1, 0.1, 0.8]]).unwrap();
        let table = top_k_select(&probs, 2).unwrap();
        let mut out = Vec::new();
        write_assignments(&mut out, &table).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(
            text,
            "patch_index,slot_1,weight_1,slot_2,weight_2\n\
             0,0,5.00000000e-1,1,3.00000000e-1\n\
             1,2,8.00000000e-1,0,1.00000000e-1\n"
        );
    }
}
