//! Bundle parameter files and loss-history CSVs.
//!
//! Bundle layout (all integers u32 little-endian unless noted, reals f64
//! little-endian):
//!
//! ```text
//! magic "AGEFAIRB" | version | kind name | input width
//! age stats flag (u8) [mean, sd]
//! split flag (u8) [modality count, per modality: length, column indices]
//! network count, per network: role name, layer count, per layer:
//!   tag (u8) 0 = dense: out, in, weights (row-major), bias
//!            1 = relu: width
//!            2 = batchnorm: width, gamma, beta, running mean, running var,
//!                momentum, epsilon
//! ```
//!
//! Strings are a length followed by UTF-8 bytes.

use std::io::{Read, Write};
use std::path::Path;

use super::train::{EpochLosses, LossHistory};
use super::{AgeStats, ModalitySplit, ModelBundle, ModelKind};
use crate::error::{Error, Result};
use crate::nn::{BatchNormLayer, DenseLayer, Layer, Network, ReluLayer, Tensor2};

const MAGIC: &[u8; 8] = b"AGEFAIRB";
pub const BUNDLE_FORMAT_VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v)
            .map_err(|_| Error::Input(format!("{v} does not fit the file format")))?;
        self.0.extend_from_slice(&v.to_le_bytes());
        Ok(())
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
    fn str(&mut self, s: &str) -> Result<()> {
        self.u32(s.len())?;
        self.0.extend_from_slice(s.as_bytes());
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    name: String,
}

impl Reader<'_> {
    fn fail(&self, what: &str) -> Error {
        Error::Format {
            source_name: self.name.clone(),
            message: format!("{what} at byte {}", self.pos),
        }
    }
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.buf.len() {
            return Err(self.fail("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n > self.buf.len() {
            return Err(self.fail("implausible length"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        let bytes = self.take(n)?.to_vec();
        String::from_utf8(bytes).map_err(|_| self.fail("invalid UTF-8"))
    }
}

fn write_network(w: &mut Writer, role: &str, net: &Network) -> Result<()> {
    w.str(role)?;
    w.u32(net.layers().len())?;
    for layer in net.layers() {
        match layer {
            Layer::Dense(d) => {
                w.u8(0);
                w.u32(d.output_width())?;
                w.u32(d.input_width())?;
                w.f64s(d.weights.data());
                w.f64s(&d.bias);
            }
            Layer::Relu(r) => {
                w.u8(1);
                w.u32(r.width)?;
            }
            Layer::BatchNorm(b) => {
                w.u8(2);
                w.u32(b.width())?;
                w.f64s(&b.gamma);
                w.f64s(&b.beta);
                w.f64s(&b.running_mean);
                w.f64s(&b.running_var);
                w.f64(b.momentum);
                w.f64(b.epsilon);
            }
        }
    }
    Ok(())
}

fn read_network(r: &mut Reader<'_>) -> Result<(String, Network)> {
    let role = r.str()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        layers.push(match r.u8()? {
            0 => {
                let out = r.u32()?;
                let inp = r.u32()?;
                let weights = Tensor2::from_vec(out, inp, r.f64s(out * inp)?)?;
                let bias = r.f64s(out)?;
                Layer::Dense(DenseLayer::from_parts(weights, bias)?)
            }
            1 => Layer::Relu(ReluLayer::new(r.u32()?)),
            2 => {
                let width = r.u32()?;
                let mut b = BatchNormLayer::new(width);
                b.gamma = r.f64s(width)?;
                b.beta = r.f64s(width)?;
                b.running_mean = r.f64s(width)?;
                b.running_var = r.f64s(width)?;
                b.momentum = r.f64()?;
                b.epsilon = r.f64()?;
                Layer::BatchNorm(b)
            }
            t => return Err(r.fail(&format!("unknown layer tag {t}"))),
        });
    }
    Ok((role, Network::new(layers)?))
}

pub fn save_bundle(path: &Path, bundle: &ModelBundle) -> Result<()> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(BUNDLE_FORMAT_VERSION as usize)?;
    w.str(bundle.kind.name())?;
    w.u32(bundle.input_width)?;
    match bundle.age_stats {
        Some(s) => {
            w.u8(1);
            w.f64(s.mean);
            w.f64(s.sd);
        }
        None => w.u8(0),
    }
    match &bundle.split {
        Some(split) => {
            w.u8(1);
            w.u32(split.modalities.len())?;
            for m in &split.modalities {
                w.u32(m.len())?;
                for &c in m {
                    w.u32(c)?;
                }
            }
        }
        None => w.u8(0),
    }
    let nets = bundle.networks();
    w.u32(nets.len())?;
    for (role, net) in nets {
        write_network(&mut w, role, net)?;
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&w.0))
        .map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<ModelBundle> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        name: path.display().to_string(),
    };
    if r.take(8)? != MAGIC {
        return Err(r.fail("not a model bundle"));
    }
    let version = r.u32()?;
    if version != BUNDLE_FORMAT_VERSION as usize {
        return Err(r.fail(&format!("unsupported version {version}")));
    }
    let kind: ModelKind = r.str()?.parse()?;
    let input_width = r.u32()?;
    let age_stats = match r.u8()? {
        0 => None,
        _ => Some(AgeStats {
            mean: r.f64()?,
            sd: r.f64()?,
        }),
    };
    let split = match r.u8()? {
        0 => None,
        _ => {
            let m = r.u32()?;
            let mut modalities = Vec::with_capacity(m.min(1024));
            for _ in 0..m {
                let len = r.u32()?;
                modalities.push((0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
            }
            Some(ModalitySplit { modalities })
        }
    };
    let count = r.u32()?;
    let mut interpreters = Vec::new();
    let (mut classifier, mut adversary, mut reconstructor, mut discriminator) =
        (None, None, None, None);
    for _ in 0..count {
        let (role, net) = read_network(&mut r)?;
        match role.as_str() {
            "interpreter" => interpreters.push(net),
            "classifier" => classifier = Some(net),
            "adversary" => adversary = Some(net),
            "reconstructor" => reconstructor = Some(net),
            "discriminator" => discriminator = Some(net),
            other => return Err(r.fail(&format!("unknown network role {other:?}"))),
        }
    }
    if r.pos != buf.len() {
        return Err(r.fail("trailing bytes"));
    }
    let classifier = classifier.ok_or_else(|| r.fail("missing classifier"))?;
    if interpreters.is_empty() {
        return Err(r.fail("missing interpreter"));
    }
    Ok(ModelBundle {
        kind,
        interpreters,
        classifier,
        adversary,
        reconstructor,
        discriminator,
        split,
        age_stats,
        input_width,
    })
}

const HISTORY_HEADER: [&str; 5] = ["epoch", "loss_c", "loss_a", "loss_r", "loss_d"];

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// `epoch,loss_c,loss_a,loss_r,loss_d`, leaving inactive terms empty.
pub fn write_history(path: &Path, history: &LossHistory) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HISTORY_HEADER)?;
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.loss_c.to_string(),
            opt_cell(e.loss_a),
            opt_cell(e.loss_r),
            opt_cell(e.loss_d),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history(path: &Path, kind: ModelKind) -> Result<LossHistory> {
    let mut r = csv::Reader::from_path(path)?;
    let fail = |m: String| Error::Format {
        source_name: path.display().to_string(),
        message: m,
    };
    if r.headers()?.iter().collect::<Vec<_>>() != HISTORY_HEADER {
        return Err(fail("loss history header mismatch".into()));
    }
    let cell = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|_| fail(format!("bad loss value {s:?}")))
        }
    };
    let mut epochs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        epochs.push(EpochLosses {
            epoch: rec[0]
                .parse()
                .map_err(|_| fail(format!("bad epoch {:?}", &rec[0])))?,
            loss_c: cell(&rec[1])?.ok_or_else(|| fail("missing loss_c".into()))?,
            loss_a: cell(&rec[2])?,
            loss_r: cell(&rec[3])?,
            loss_d: cell(&rec[4])?,
        });
    }
    Ok(LossHistory { kind, epochs })
}
