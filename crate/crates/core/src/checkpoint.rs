// Copyright 2026 The gateprune Authors
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//     http://www.apache.org/licenses/LICENSE-2.0
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

//! Versioned binary checkpoints of a training state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic "GPCK" | u32 version | sections... | u32 crc32 of everything before it
//! section := 4-byte tag | u64 byte length | payload
//! ```
//!
//! Sections, in order: `ARCH` (input shape, loss, layer kinds and shapes), `WGHT`
//! (weights and biases), `GATE` (all gate vectors), `ITER` (counters and bookkeeping),
//! `RNG ` (generator seed, stream and position), `CONF` (training configuration as
//! TOML) and `OPTM` (optimizer moments). Floats are stored as raw bit patterns, so a
//! round trip is bit-exact.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::network::{GateLayer, GateState, Layer, Network, Params};
use crate::tensor::{ActivationKind, LossKind, Tensor};
use crate::trainer::{OptimizerState, Phase, TrainConfig, TrainState};

pub const MAGIC: &[u8; 4] = b"GPCK";
pub const VERSION: u32 = 1;

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn f64(&mut self, v: f64) {
        self.u64(v.to_bits());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.f64(x));
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|&x| self.usize(x));
    }
    fn bytes(&mut self, v: &[u8]) {
        self.usize(v.len());
        self.buf.extend_from_slice(v);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.buf.extend_from_slice(tag);
        self.u64(body.buf.len() as u64);
        self.buf.extend_from_slice(&body.buf);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflow".into()))
    }
    fn len(&mut self, elem: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(elem) > self.buf.len() - self.pos {
            return Err(Error::Checkpoint("length prefix exceeds section".into()));
        }
        Ok(n)
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_bits(self.u64()?))
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let t = self.take(4)?;
        if t != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {:?}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(t)
            )));
        }
        let n = self.usize()?;
        Ok(Reader::new(self.take(n)?))
    }
    fn finish(&self, what: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Checkpoint(format!("trailing bytes in section {what}")));
        }
        Ok(())
    }
}

fn write_activation(w: &mut Writer, a: ActivationKind) {
    match a {
        ActivationKind::Identity => w.u8(0),
        ActivationKind::LeakyRelu { slope } => {
            w.u8(1);
            w.f64(slope);
        }
        ActivationKind::SoftmaxOutput => w.u8(2),
    }
}

fn read_activation(r: &mut Reader) -> Result<ActivationKind> {
    Ok(match r.u8()? {
        0 => ActivationKind::Identity,
        1 => ActivationKind::LeakyRelu { slope: r.f64()? },
        2 => ActivationKind::SoftmaxOutput,
        t => return Err(Error::Checkpoint(format!("unknown activation tag {t}"))),
    })
}

fn encode_arch(net: &Network) -> Writer {
    let mut w = Writer::default();
    w.usizes(net.input_shape());
    match net.loss() {
        LossKind::GaussianNll { tau } => {
            w.u8(0);
            w.f64(tau);
        }
        LossKind::CategoricalCe => w.u8(1),
    }
    w.usize(net.layers().len());
    for layer in net.layers() {
        match layer {
            Layer::Dense { params, activation, gated } | Layer::Conv { params, activation, gated } => {
                w.u8(if matches!(layer, Layer::Dense { .. }) { 0 } else { 1 });
                write_activation(&mut w, *activation);
                w.u8(u8::from(*gated));
                w.usizes(params.weights.shape());
            }
            Layer::MaxPool => w.u8(2),
            Layer::Flatten => w.u8(3),
        }
    }
    w
}

fn encode_params(list: &[Option<Params>]) -> Writer {
    let mut w = Writer::default();
    w.usize(list.len());
    for p in list {
        match p {
            Some(p) => {
                w.u8(1);
                w.usizes(p.weights.shape());
                w.f64s(p.weights.data());
                w.f64s(&p.bias);
            }
            None => w.u8(0),
        }
    }
    w
}

fn decode_params(r: &mut Reader) -> Result<Vec<Option<Params>>> {
    let n = r.len(1)?;
    (0..n)
        .map(|_| {
            Ok(match r.u8()? {
                0 => None,
                1 => {
                    let shape = r.usizes()?;
                    let data = r.f64s()?;
                    let bias = r.f64s()?;
                    Some(Params {
                        weights: Tensor::new(shape, data).map_err(|e| Error::Checkpoint(e.to_string()))?,
                        bias,
                    })
                }
                t => return Err(Error::Checkpoint(format!("bad parameter flag {t}"))),
            })
        })
        .collect()
}

fn decode_network(arch: &mut Reader, weights: &mut Reader) -> Result<Network> {
    let input_shape = arch.usizes()?;
    let loss = match arch.u8()? {
        0 => LossKind::GaussianNll { tau: arch.f64()? },
        1 => LossKind::CategoricalCe,
        t => return Err(Error::Checkpoint(format!("unknown loss tag {t}"))),
    };
    let n = arch.len(1)?;
    let params = decode_params(weights)?;
    if params.len() != n {
        return Err(Error::Checkpoint("weight section does not match architecture".into()));
    }
    let mut layers = Vec::with_capacity(n);
    for p in params {
        let layer = match arch.u8()? {
            kind @ (0 | 1) => {
                let activation = read_activation(arch)?;
                let gated = arch.u8()? != 0;
                let shape = arch.usizes()?;
                let params = p.ok_or_else(|| Error::Checkpoint("missing weights".into()))?;
                if params.weights.shape() != shape.as_slice() {
                    return Err(Error::Checkpoint("weight shape does not match architecture".into()));
                }
                if kind == 0 {
                    Layer::Dense { params, activation, gated }
                } else {
                    Layer::Conv { params, activation, gated }
                }
            }
            2 => Layer::MaxPool,
            3 => Layer::Flatten,
            t => return Err(Error::Checkpoint(format!("unknown layer tag {t}"))),
        };
        layers.push(layer);
    }
    Network::from_layers(input_shape, layers, loss).map_err(|e| Error::Checkpoint(e.to_string()))
}

/// Serializes a training state.
pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Writer::default();
    out.buf.extend_from_slice(MAGIC);
    out.u32(VERSION);

    out.section(b"ARCH", encode_arch(&state.net));
    let params: Vec<Option<Params>> = state.net.layers().iter().map(|l| l.params().cloned()).collect();
    out.section(b"WGHT", encode_params(&params));

    let mut g = Writer::default();
    g.u8(u8::from(state.gates.deterministic));
    g.usize(state.gates.layers.len());
    for l in &state.gates.layers {
        g.f64s(&l.theta);
        g.f64s(&l.pi_star);
        g.f64s(&l.last_xi);
        g.f64s(&l.theta_max);
        g.bytes(&l.alive.iter().map(|&a| u8::from(a)).collect::<Vec<_>>());
        g.usizes(&l.origin);
    }
    out.section(b"GATE", g);

    let mut it = Writer::default();
    it.u64(state.iteration);
    it.u64(state.epoch);
    it.u8(state.phase.code());
    it.u64(state.main_epochs);
    it.usize(state.initial_param_count);
    it.usizes(&state.initial_widths);
    it.usize(state.theta_by_origin.len());
    state.theta_by_origin.iter().for_each(|t| it.f64s(t));
    it.f64(state.last_grad_norm);
    out.section(b"ITER", it);

    let mut rng = Writer::default();
    rng.buf.extend_from_slice(&state.rng.get_seed());
    rng.u64(state.rng.get_stream());
    rng.buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());
    out.section(b"RNG ", rng);

    let mut conf = Writer::default();
    let toml = toml::to_string(&state.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    conf.bytes(toml.as_bytes());
    out.section(b"CONF", conf);

    let mut opt = Writer::default();
    opt.u64(state.opt.step);
    opt.buf.extend_from_slice(&encode_params(&state.opt.m).buf);
    opt.buf.extend_from_slice(&encode_params(&state.opt.v).buf);
    opt.usize(state.opt.theta_m.len());
    state.opt.theta_m.iter().for_each(|t| opt.f64s(t));
    state.opt.theta_v.iter().for_each(|t| opt.f64s(t));
    out.section(b"OPTM", opt);

    let crc = crc32fast::hash(&out.buf);
    out.u32(crc);
    Ok(out.buf)
}

/// Parses a checkpoint produced by [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {VERSION})")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (corrupted file)".into()));
    }
    let mut r = Reader::new(&body[8..]);

    let mut arch = r.section(b"ARCH")?;
    let mut wght = r.section(b"WGHT")?;
    let net = decode_network(&mut arch, &mut wght)?;
    arch.finish("ARCH")?;
    wght.finish("WGHT")?;

    let mut g = r.section(b"GATE")?;
    let deterministic = g.u8()? != 0;
    let n = g.len(1)?;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        let theta = g.f64s()?;
        let pi_star = g.f64s()?;
        let last_xi = g.f64s()?;
        let theta_max = g.f64s()?;
        let alive = g.bytes()?.iter().map(|&b| b != 0).collect::<Vec<_>>();
        let origin = g.usizes()?;
        let w = theta.len();
        if [pi_star.len(), last_xi.len(), theta_max.len(), alive.len(), origin.len()].iter().any(|&l| l != w) {
            return Err(Error::Checkpoint("inconsistent gate vectors".into()));
        }
        layers.push(GateLayer { theta, pi_star, last_xi, theta_max, alive, origin });
    }
    g.finish("GATE")?;
    let gates = GateState { layers, deterministic };

    let mut it = r.section(b"ITER")?;
    let iteration = it.u64()?;
    let epoch = it.u64()?;
    let phase = Phase::from_code(it.u8()?)?;
    let main_epochs = it.u64()?;
    let initial_param_count = it.usize()?;
    let initial_widths = it.usizes()?;
    let k = it.len(8)?;
    let theta_by_origin = (0..k).map(|_| it.f64s()).collect::<Result<Vec<_>>>()?;
    let last_grad_norm = it.f64()?;
    it.finish("ITER")?;

    let mut rr = r.section(b"RNG ")?;
    let seed: [u8; 32] = rr.take(32)?.try_into().expect("32 bytes");
    let stream = rr.u64()?;
    let word_pos = u128::from_le_bytes(rr.take(16)?.try_into().expect("16 bytes"));
    rr.finish("RNG")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let mut c = r.section(b"CONF")?;
    let text = std::str::from_utf8(c.bytes()?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    c.finish("CONF")?;
    let config: TrainConfig = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;

    let mut o = r.section(b"OPTM")?;
    let step = o.u64()?;
    let m = decode_params(&mut o)?;
    let v = decode_params(&mut o)?;
    let k = o.len(8)?;
    let theta_m = (0..k).map(|_| o.f64s()).collect::<Result<Vec<_>>>()?;
    let theta_v = (0..k).map(|_| o.f64s()).collect::<Result<Vec<_>>>()?;
    o.finish("OPTM")?;
    r.finish("file")?;
    let opt = OptimizerState { step, m, v, theta_m, theta_v };

    TrainState::from_parts(
        config,
        net,
        gates,
        opt,
        rng,
        (iteration, epoch, phase, main_epochs),
        (initial_param_count, initial_widths, theta_by_origin),
        last_grad_norm,
    )
}

/// Writes a checkpoint atomically (temporary file plus rename).
pub fn save_checkpoint(path: &Path, state: &TrainState) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::network::LayerSpec;
    use crate::trainer::PriorConfig;

    fn state() -> (TrainState, crate::data::Dataset) {
        let data = synth_blobs(3, 4, 20, 1, 2.0).unwrap();
        let config = TrainConfig {
            batch_size: 16,
            epochs: 2,
            lambda: 1.0,
            prior: PriorConfig { log_gamma: -5.0, ..PriorConfig::default() },
            ..TrainConfig::default()
        };
        let specs = vec![
            LayerSpec::Dense { units: 5, activation: ActivationKind::LeakyRelu { slope: 1e-3 }, gated: true },
            LayerSpec::Dense { units: 3, activation: ActivationKind::SoftmaxOutput, gated: false },
        ];
        (TrainState::init(&[4], &specs, LossKind::CategoricalCe, config).unwrap(), data)
    }

    #[test]
    fn round_trip_is_exact() {
        let (mut s, data) = state();
        s.train_epoch(&data).unwrap();
        let back = from_bytes(&to_bytes(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn wrong_version_and_corruption_are_rejected() {
        let (s, _) = state();
        let mut bytes = to_bytes(&s).unwrap();
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(from_bytes(&v2), Err(Error::Checkpoint(m)) if m.contains("version")));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(m)) if m.contains("checksum")));
        assert!(from_bytes(b"nope").is_err());
    }

    #[test]
    fn resumed_run_matches_straight_run() {
        let (mut straight, data) = state();
        let rows_a = straight.run(&data, Some(&data), &mut |_, _| Ok(())).unwrap();
        let (mut first, _) = state();
        first.config.epochs = 1;
        let mut rows_b = first.run(&data, Some(&data), &mut |_, _| Ok(())).unwrap();
        let mut resumed = from_bytes(&to_bytes(&first).unwrap()).unwrap();
        resumed.config.epochs = 2;
        rows_b.extend(resumed.run(&data, Some(&data), &mut |_, _| Ok(())).unwrap());
        assert_eq!(rows_a, rows_b);
        resumed.config.epochs = 2;
        assert_eq!(resumed, straight);
    }
}
