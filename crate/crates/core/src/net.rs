//! Encoder-decoder assembly: a toy five-block encoder, refined and
//! downsampled skip connections, gated multilevel exchange in the
//! decoder, and three disparity chains at strides 1, 2 and 4.

use serde::{Deserialize, Serialize};

use crate::disparity::{DispConfig, DispHead, DispKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{ConvElu, ConvSpec, Module};
use crate::param::{Init, ParamId, ParamStore, Scope};
use crate::refine::{Refine, RefineConfig, RefineKind};
use crate::resample::{full_gate, DownKind, DownTimes, Up, UpKind, UpRefine};
use crate::scalar::Float;

/// How shallower refined skips enter deeper decoder stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IeMode {
    /// Only the same-stage skip is added.
    NoIe,
    /// Every shallower skip is added with unit weight.
    PlainIe,
    /// Every shallower skip is added through a zero-initialised gate.
    AdaIe,
}

/// Refinement settings of one stage. Patches are `H_in / sub_div` by
/// `W_in / sub_div` pixels of the stage map, where `H_in x W_in` is the
/// network input extent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub squeeze: usize,
    pub sub_div: usize,
    pub embed: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispStage {
    pub sub_div: usize,
    pub embed: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variants {
    pub refine: RefineKind,
    pub down: DownKind,
    pub up: UpKind,
    pub ie: IeMode,
    pub disp: DispKind,
}

impl Default for Variants {
    fn default() -> Self {
        Variants {
            refine: RefineKind::AdaRm,
            down: DownKind::AdaAxialNpcas,
            up: UpKind::DAdaNrsu,
            ie: IeMode::AdaIe,
            disp: DispKind::AttDisp,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub height: usize,
    pub width: usize,
    pub enc_channels: [usize; 5],
    pub dec_channels: [usize; 4],
    pub stages: [StageConfig; 5],
    pub disp: [DispStage; 3],
    #[serde(default)]
    pub variants: Variants,
}

const fn stage(squeeze: usize, sub_div: usize, embed: usize, heads: usize) -> StageConfig {
    StageConfig {
        squeeze,
        sub_div,
        embed,
        heads,
    }
}

const fn disp_stage(embed: usize, heads: usize) -> DispStage {
    DispStage {
        sub_div: 16,
        embed,
        heads,
    }
}

impl Default for NetConfig {
    fn default() -> Self {
        Self::desk(64, 96)
    }
}

impl NetConfig {
    /// Desk-scale widths with the reference squeeze ratios and patch
    /// divisors and reduced embedding widths.
    pub fn desk(height: usize, width: usize) -> Self {
        NetConfig {
            height,
            width,
            enc_channels: [16, 24, 32, 48, 64],
            dec_channels: [16, 24, 32, 48],
            stages: [
                stage(2, 16, 8, 2),
                stage(4, 16, 12, 2),
                stage(4, 16, 16, 4),
                stage(8, 16, 24, 4),
                stage(8, 32, 32, 4),
            ],
            disp: [disp_stage(12, 2), disp_stage(24, 4), disp_stage(32, 4)],
            variants: Variants::default(),
        }
    }

    /// Reference embedding widths and head counts. Channel widths are
    /// left at the desk values.
    pub fn reference(height: usize, width: usize) -> Self {
        NetConfig {
            stages: [
                stage(2, 16, 24, 2),
                stage(4, 16, 48, 4),
                stage(4, 16, 64, 4),
                stage(8, 16, 160, 8),
                stage(8, 32, 256, 8),
            ],
            ..Self::desk(height, width)
        }
    }

    /// 32x32 network small enough for finite-difference checks.
    pub fn tiny() -> Self {
        NetConfig {
            height: 32,
            width: 32,
            enc_channels: [4, 4, 4, 8, 8],
            dec_channels: [4, 4, 4, 8],
            stages: [
                stage(2, 8, 4, 2),
                stage(2, 8, 4, 2),
                stage(2, 8, 4, 2),
                stage(2, 16, 4, 2),
                stage(2, 32, 4, 2),
            ],
            disp: [DispStage {
                sub_div: 8,
                embed: 4,
                heads: 2,
            }; 3],
            variants: Variants::default(),
        }
    }

    pub fn with_variants(mut self, variants: Variants) -> Self {
        self.variants = variants;
        self
    }

    /// Map extent at stride `2^(level + 1)`.
    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        (self.height >> (level + 1), self.width >> (level + 1))
    }

    fn sub(&self, div: usize) -> (usize, usize) {
        (self.height / div.max(1), self.width / div.max(1))
    }

    fn refine_cfg(&self, stage: usize, channels: usize) -> RefineConfig {
        let st = &self.stages[stage];
        let (height, width) = self.level_hw(stage);
        RefineConfig {
            channels,
            height,
            width,
            squeeze: st.squeeze,
            sub: self.sub(st.sub_div),
            embed: st.embed,
            heads: st.heads,
            kind: self.variants.refine,
        }
    }

    fn up_refine(&self, stage: usize) -> UpRefine {
        let st = &self.stages[stage];
        UpRefine {
            squeeze: st.squeeze,
            sub: self.sub(st.sub_div),
            embed: st.embed,
            heads: st.heads,
        }
    }

    fn disp_cfg(&self, k: usize) -> DispConfig {
        let d = &self.disp[k];
        DispConfig {
            channels: self.dec_channels[k],
            height: self.height >> k,
            width: self.width >> k,
            sub: self.sub(d.sub_div),
            embed: d.embed,
            heads: d.heads,
            kind: self.variants.disp,
        }
    }

    /// Checks every divisibility constraint of the assembled network.
    pub fn validate(&self) -> Result<()> {
        let err = |path: &str, message: String| Error::Config {
            path: path.into(),
            message,
        };
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return Err(err(
                "height",
                format!("{}x{} not divisible by 32", self.height, self.width),
            ));
        }
        if self.enc_channels.contains(&0) || self.dec_channels.contains(&0) {
            return Err(err("enc_channels", "channel widths must be positive".into()));
        }
        for (s, st) in self.stages.iter().enumerate() {
            let path = format!("stages[{s}]");
            if st.sub_div == 0 || self.height % st.sub_div != 0 || self.width % st.sub_div != 0 {
                return Err(err(&path, format!("sub_div {} does not divide the input", st.sub_div)));
            }
        }
        for (k, d) in self.disp.iter().enumerate() {
            if d.sub_div == 0 || self.height % d.sub_div != 0 || self.width % d.sub_div != 0 {
                return Err(err(
                    &format!("disp[{k}]"),
                    format!("sub_div {} does not divide the input", d.sub_div),
                ));
            }
            let c = self.disp_cfg(k);
            crate::nn::token_grid(c.height, c.width, c.sub).map_err(|_| {
                err(
                    &format!("disp[{k}]"),
                    format!("{}x{} map not divisible into {:?} patches", c.height, c.width, c.sub),
                )
            })?;
            crate::nn::MhaSpec::new(1, c.embed, c.heads).map_err(|e| err(&format!("disp[{k}]"), e.to_string()))?;
        }
        let mut checks = Vec::new();
        for s in 0..4 {
            checks.push((s, self.dec_channels[s], format!("skip stage {s}")));
        }
        for k in 0..4 {
            checks.push((k + 1, self.dec_channels[k], format!("decoder stage {k}")));
            checks.push((k + 1, 4 * self.dec_channels[k], format!("decoder stage {k} upsampler")));
        }
        for k in 0..3 {
            checks.push((k, self.dec_channels[k], format!("disparity chain {k}")));
            checks.push((k, 4 * self.dec_channels[k], format!("disparity chain {k} upsampler")));
        }
        for (stage, channels, what) in checks {
            self.refine_cfg(stage, channels)
                .validate()
                .map_err(|e| err(&format!("stages[{stage}]"), format!("{what}: {e}")))?;
        }
        Ok(())
    }
}

/// One encoder level.
#[derive(Debug, Clone, Copy)]
pub struct Level {
    pub index: usize,
    pub var: Var,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Level>,
}

impl FeaturePyramid {
    pub fn get(&self, i: usize) -> Var {
        self.levels[i].var
    }
}

/// Stride-2 3x3 convolution then a 3x3 convolution, both with ELU.
#[derive(Debug, Clone)]
pub struct EncBlock {
    pub down: ConvElu,
    pub conv: ConvElu,
}

impl EncBlock {
    pub fn new<T: Float>(s: &mut Scope<'_, T>, name: &str, cin: usize, cout: usize) -> Result<Self> {
        let mut s = s.sub(name);
        Ok(EncBlock {
            down: ConvElu::new(&mut s, "down", ConvSpec::new(cin, cout, 3).stride(2))?,
            conv: ConvElu::new(&mut s, "conv", ConvSpec::new(cout, cout, 3))?,
        })
    }
}

impl Module for EncBlock {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.down.forward(g, x)?;
        self.conv.forward(g, y)
    }
}

/// `F_refine(F_ct(F_down^j(X_enc^i)))`.
#[derive(Debug, Clone)]
pub struct Skip {
    pub down: DownTimes,
    pub ct: ConvElu,
    pub refine: Refine,
}

/// `F_up(F_refine(F_ct(x)))`.
#[derive(Debug, Clone)]
pub struct UpPath {
    pub ct: ConvElu,
    pub refine: Refine,
    pub up: Up,
}

impl Module for UpPath {
    fn forward<T: Float>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let y = self.ct.forward(g, x)?;
        let y = self.refine.forward(g, y)?;
        self.up.forward(g, y)
    }
}

#[derive(Debug, Clone)]
pub struct Net {
    pub cfg: NetConfig,
    pub encoder: Vec<EncBlock>,
    /// `skips[i][j]` for `i + j <= 3`.
    pub skips: Vec<Vec<Skip>>,
    /// `top[k]` produces the upsampled term of decoder stage `k`.
    pub top: Vec<UpPath>,
    /// `ie_gates[k][i]` multiplies skip `(i, k - i)` for `i < k`.
    pub ie_gates: Vec<Vec<ParamId>>,
    pub chains: Vec<UpPath>,
    pub heads: Vec<DispHead>,
}

/// Outputs of a full forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// Decoder maps `X_dec^0 ..= X_dec^3`.
    pub dec: Vec<Var>,
    /// Chain features at strides 1, 2, 4.
    pub chains: Vec<Var>,
    /// Disparities at strides 1, 2, 4.
    pub disp: Vec<Var>,
}

impl Net {
    pub fn new<T: Float>(store: &mut ParamStore<T>, cfg: NetConfig) -> Result<Self> {
        cfg.validate()?;
        let (ce, cd) = (cfg.enc_channels, cfg.dec_channels);
        let mut root = store.scope("");

        let mut enc = root.sub("encoder");
        let mut encoder = Vec::new();
        let mut cin = 3;
        for (i, &c) in ce.iter().enumerate() {
            encoder.push(EncBlock::new(&mut enc, &format!("block{i}"), cin, c)?);
            cin = c;
        }

        let mut sk = root.sub("skip");
        let mut skips = Vec::new();
        for i in 0..4 {
            let (h, w) = cfg.level_hw(i);
            let mut row = Vec::new();
            for j in 0..4 - i {
                let mut s = sk.sub(&format!("{i}_{j}"));
                row.push(Skip {
                    down: DownTimes::new(&mut s, "down", cfg.variants.down, ce[i], h, w, j)?,
                    ct: ConvElu::new(&mut s, "ct", ConvSpec::new(ce[i], cd[i + j], 3))?,
                    refine: Refine::new(&mut s, "refine", cfg.refine_cfg(i + j, cd[i + j]))?,
                });
            }
            skips.push(row);
        }

        let mut dec = root.sub("decoder");
        let mut top = Vec::new();
        for k in 0..4 {
            let cin = if k == 3 { ce[4] } else { cd[k + 1] };
            let mut s = dec.sub(&format!("top{k}"));
            top.push(up_path(&mut s, &cfg, cin, cd[k], k + 1)?);
        }
        let mut ie_gates = Vec::new();
        for k in 0..4 {
            let (h, w) = cfg.level_hw(k);
            let gates = (0..k)
                .map(|i| dec.add(&format!("ie{k}_{i}"), &[cd[k], h, w], Init::Zero))
                .collect::<Result<Vec<_>>>()?;
            ie_gates.push(gates);
        }

        let mut dsp = root.sub("disp");
        let mut chains = Vec::new();
        let mut heads = Vec::new();
        for k in 0..3 {
            let mut s = dsp.sub(&format!("chain{k}"));
            chains.push(up_path(&mut s, &cfg, cd[k], cd[k], k)?);
            heads.push(DispHead::new(&mut s, "head", &cfg.disp_cfg(k))?);
        }

        Ok(Net {
            cfg,
            encoder,
            skips,
            top,
            ie_gates,
            chains,
            heads,
        })
    }

    pub fn encode<T: Float>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<FeaturePyramid> {
        let s = g.shape(image);
        let want = [3, self.cfg.height, self.cfg.width];
        if s.len() != 4 || s[1..] != want {
            return Err(Error::shape("encode", format!("[B, 3, {}, {}]", want[1], want[2]), s));
        }
        let mut x = image;
        let mut levels = Vec::new();
        for (i, b) in self.encoder.iter().enumerate() {
            x = b.forward(g, x)?;
            levels.push(Level {
                index: i,
                var: x,
                stride: 2 << i,
                channels: self.cfg.enc_channels[i],
            });
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn refine_skip<T: Float>(&self, g: &mut Graph<'_, T>, pyr: &FeaturePyramid, i: usize, j: usize) -> Result<Var> {
        let skip = self.skips.get(i).and_then(|r| r.get(j)).ok_or_else(|| Error::Config {
            path: "refine_skip".into(),
            message: format!("no skip ({i}, {j})"),
        })?;
        let y = skip.down.forward(g, pyr.get(i))?;
        let y = skip.ct.forward(g, y)?;
        skip.refine.forward(g, y)
    }

    /// Decoder maps `X_dec^0 ..= X_dec^3`.
    pub fn decode<T: Float>(&self, g: &mut Graph<'_, T>, pyr: &FeaturePyramid) -> Result<Vec<Var>> {
        let mut dec = vec![None; 4];
        let mut below = pyr.get(4);
        for k in (0..4).rev() {
            let up = self.top[k].forward(g, below)?;
            let same = self.refine_skip(g, pyr, k, 0)?;
            check_channels(g, same, up, k)?;
            let mut y = g.add(up, same)?;
            if self.cfg.variants.ie != IeMode::NoIe {
                for i in 0..k {
                    let extra = self.refine_skip(g, pyr, i, k - i)?;
                    let term = match self.cfg.variants.ie {
                        IeMode::AdaIe => full_gate(g, self.ie_gates[k][i], extra)?,
                        _ => extra,
                    };
                    y = g.add(y, term)?;
                }
            }
            dec[k] = Some(y);
            below = y;
        }
        Ok(dec.into_iter().map(|v| v.expect("filled")).collect())
    }

    /// Chain `k` features and disparity from decoder map `X_dec^k`.
    pub fn chain<T: Float>(&self, g: &mut Graph<'_, T>, dec_k: Var, k: usize) -> Result<(Var, Var)> {
        let f = self.chains[k].forward(g, dec_k)?;
        let d = self.heads[k].forward(g, f)?;
        Ok((f, d))
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<NetOutput> {
        let pyr = self.encode(g, image)?;
        let dec = self.decode(g, &pyr)?;
        let mut chains = Vec::new();
        let mut disp = Vec::new();
        for (k, &d) in dec.iter().enumerate().take(3) {
            let (f, o) = self.chain(g, d, k)?;
            chains.push(f);
            disp.push(o);
        }
        Ok(NetOutput { dec, chains, disp })
    }

    /// Full-resolution disparity only.
    pub fn forward_full_res<T: Float>(&self, g: &mut Graph<'_, T>, image: Var) -> Result<Var> {
        let pyr = self.encode(g, image)?;
        let dec = self.decode(g, &pyr)?;
        Ok(self.chain(g, dec[0], 0)?.1)
    }
}

fn up_path<T: Float>(s: &mut Scope<'_, T>, cfg: &NetConfig, cin: usize, cout: usize, stage: usize) -> Result<UpPath> {
    let (h, w) = cfg.level_hw(stage);
    Ok(UpPath {
        ct: ConvElu::new(s, "ct", ConvSpec::new(cin, cout, 3))?,
        refine: Refine::new(s, "refine", cfg.refine_cfg(stage, cout))?,
        up: Up::new(s, "up", cfg.variants.up, cout, h, w, cfg.up_refine(stage))?,
    })
}

fn check_channels<T: Float>(g: &Graph<'_, T>, skip: Var, up: Var, k: usize) -> Result<()> {
    let (a, b) = (g.shape(skip)[1], g.shape(up)[1]);
    if a != b {
        return Err(Error::ChannelMismatch {
            context: format!("decoder stage {k}"),
            expected: b,
            got: a,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(cfg: &NetConfig, seed: u64) -> Tensor<f64> {
        Tensor::rand_uniform(
            &[1, 3, cfg.height, cfg.width],
            0.0,
            1.0,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
    }

    #[test]
    fn presets_validate() {
        NetConfig::desk(64, 96).validate().unwrap();
        NetConfig::tiny().validate().unwrap();
        NetConfig::reference(384, 1280).validate().unwrap();
        assert!(NetConfig::desk(48, 96).validate().is_err());
    }

    #[test]
    fn encoder_strides() {
        let cfg = NetConfig::desk(64, 96);
        let mut store = ParamStore::<f64>::new(0);
        let net = Net::new(&mut store, cfg.clone()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(image(&cfg, 1));
        let pyr = net.encode(&mut g, x).unwrap();
        let dims: Vec<_> = pyr
            .levels
            .iter()
            .map(|l| (g.shape(l.var)[2], g.shape(l.var)[3]))
            .collect();
        assert_eq!(dims, vec![(32, 48), (16, 24), (8, 12), (4, 6), (2, 3)]);
        let strides: Vec<_> = pyr.levels.iter().map(|l| l.stride).collect();
        assert_eq!(strides, vec![2, 4, 8, 16, 32]);
    }

    #[test]
    fn skip_shapes_and_identity_refine() {
        let cfg = NetConfig::desk(64, 96);
        let mut store = ParamStore::<f64>::new(0);
        let net = Net::new(&mut store, cfg.clone()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(image(&cfg, 1));
        let pyr = net.encode(&mut g, x).unwrap();
        let s = net.refine_skip(&mut g, &pyr, 0, 2).unwrap();
        assert_eq!(g.shape(s), &[1, 32, 8, 12]);
        let sk = &net.skips[0][2];
        let d = sk.down.forward(&mut g, pyr.get(0)).unwrap();
        let c = sk.ct.forward(&mut g, d).unwrap();
        assert!(g.value(s).bit_eq(g.value(c)));
    }

    #[test]
    fn forward_shapes() {
        let cfg = NetConfig::tiny();
        let mut store = ParamStore::<f64>::new(0);
        let net = Net::new(&mut store, cfg.clone()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(image(&cfg, 2));
        let out = net.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(out.dec[0]), &[1, 4, 16, 16]);
        let disp: Vec<_> = out.disp.iter().map(|&d| g.shape(d).to_vec()).collect();
        assert_eq!(disp, vec![vec![1, 1, 32, 32], vec![1, 1, 16, 16], vec![1, 1, 8, 8]]);
    }

    #[test]
    fn desk_decoder_shape() {
        let cfg = NetConfig::desk(64, 96);
        let mut store = ParamStore::<f64>::new(0);
        let net = Net::new(&mut store, cfg.clone()).unwrap();
        let mut g = Graph::with_params(&store);
        let x = g.constant(image(&cfg, 2));
        let pyr = net.encode(&mut g, x).unwrap();
        let dec = net.decode(&mut g, &pyr).unwrap();
        assert_eq!(g.shape(dec[0]), &[1, 16, 32, 48]);
    }

    fn decode_with(cfg: &NetConfig, store: &ParamStore<f64>, ie: IeMode) -> Vec<Tensor<f64>> {
        let mut c = cfg.clone();
        c.variants.ie = ie;
        let mut scratch = ParamStore::<f64>::new(0);
        let net = Net::new(&mut scratch, c.clone()).unwrap();
        let mut g = Graph::with_params(store);
        let x = g.constant(image(&c, 3));
        let pyr = net.encode(&mut g, x).unwrap();
        net.decode(&mut g, &pyr)
            .unwrap()
            .iter()
            .map(|&v| g.value(v).clone())
            .collect()
    }

    #[test]
    fn ada_ie_at_init_equals_no_ie() {
        let cfg = NetConfig::tiny();
        let mut store = ParamStore::<f64>::new(4);
        Net::new(&mut store, cfg.clone()).unwrap();
        let a = decode_with(&cfg, &store, IeMode::AdaIe);
        let b = decode_with(&cfg, &store, IeMode::NoIe);
        assert!(a.iter().zip(&b).all(|(x, y)| x.bit_eq(y)));
    }

    #[test]
    fn plain_ie_equals_unit_gates() {
        let cfg = NetConfig::tiny();
        let mut store = ParamStore::<f64>::new(4);
        let net = Net::new(&mut store, cfg.clone()).unwrap();
        store.perturb_all(5, 0.1);
        let plain = decode_with(&cfg, &store, IeMode::PlainIe);
        for row in &net.ie_gates {
            for &p in row {
                let ones = Tensor::ones(store.value(p).shape());
                store.set_value(p, ones).unwrap();
            }
        }
        let ada = decode_with(&cfg, &store, IeMode::AdaIe);
        let no = decode_with(&cfg, &store, IeMode::NoIe);
        assert!(plain.iter().zip(&ada).all(|(x, y)| x.bit_eq(y)));
        assert!(!plain[3].bit_eq(&no[3]));
    }
}
