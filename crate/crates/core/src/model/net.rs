use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{graph, windowed, AttnParams, AttnVars};
use crate::autodiff::{Tape, Var};
use crate::equivariance::Margin;
use crate::error::{shape_err, Result};
use crate::ops::PadMode;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::{ModelConfig, Variant};
use super::store::{Bound, ParamStore};

/// Names and shapes of every parameter, in store order.
pub fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let k = cfg.spec.offset_kernel;
    let mut out = Vec::new();
    let conv = |out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize| {
        out.push((format!("{name}.weight"), vec![3, 3, cin, cout]));
        out.push((format!("{name}.bias"), vec![cout]));
    };
    conv(&mut out, "shallow", 3, d);
    for g in 0..cfg.n_groups {
        for b in 0..cfg.n_blocks {
            let p = format!("g{g}.b{b}");
            for w in ["w_q", "w_k", "w_v"] {
                out.push((format!("{p}.attn.{w}"), vec![d, d]));
            }
            match cfg.variant {
                Variant::Tea => {
                    for gen in ["offset_k", "offset_v"] {
                        out.push((format!("{p}.attn.{gen}.kernel"), vec![k, k, d]));
                        out.push((format!("{p}.attn.{gen}.reduce"), vec![d, 2]));
                    }
                    out.push((format!("{p}.attn.alpha_s"), vec![1]));
                    out.push((format!("{p}.attn.alpha_d"), vec![1]));
                }
                Variant::Wa => {
                    out.push((format!("{p}.attn.bias_table"), vec![windowed::bias_table_len(cfg.window)]));
                }
            }
            out.push((format!("{p}.ffn.w1"), vec![d, hid]));
            out.push((format!("{p}.ffn.b1"), vec![hid]));
            out.push((format!("{p}.ffn.w2"), vec![hid, d]));
            out.push((format!("{p}.ffn.b2"), vec![d]));
        }
        conv(&mut out, &format!("g{g}.conv"), d, d);
    }
    conv(&mut out, "body", d, d);
    conv(&mut out, "head", d, cfg.head_channels());
    out
}

fn init_params<T: Scalar, R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Result<ParamStore<T>> {
    let d = cfg.embed_dim;
    let hid = cfg.hidden_dim();
    let mut store = ParamStore::new();
    let conv = |store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut R| -> Result<()> {
        let b = 1.0 / ((9 * cin) as f64).sqrt();
        store.insert(format!("{name}.weight"), Tensor::uniform(&[3, 3, cin, cout], -b, b, rng))?;
        store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]))
    };
    conv(&mut store, "shallow", 3, d, rng)?;
    for g in 0..cfg.n_groups {
        for b in 0..cfg.n_blocks {
            let p = format!("g{g}.b{b}");
            match cfg.variant {
                Variant::Tea => {
                    let mut attn = AttnParams::<T>::random(d, cfg.spec.offset_kernel, rng);
                    let mut res = Ok(());
                    attn.visit_mut(|name, t| {
                        if res.is_ok() {
                            res = store.insert(format!("{p}.attn.{name}"), t.clone());
                        }
                    });
                    res?;
                }
                Variant::Wa => {
                    let bd = 1.0 / (d as f64).sqrt();
                    for w in ["w_q", "w_k", "w_v"] {
                        store.insert(format!("{p}.attn.{w}"), Tensor::uniform(&[d, d], -bd, bd, rng))?;
                    }
                    let n = windowed::bias_table_len(cfg.window);
                    store.insert(format!("{p}.attn.bias_table"), Tensor::zeros(&[n]))?;
                }
            }
            let (b1, b2) = (1.0 / (d as f64).sqrt(), 1.0 / (hid as f64).sqrt());
            store.insert(format!("{p}.ffn.w1"), Tensor::uniform(&[d, hid], -b1, b1, rng))?;
            store.insert(format!("{p}.ffn.b1"), Tensor::zeros(&[hid]))?;
            store.insert(format!("{p}.ffn.w2"), Tensor::uniform(&[hid, d], -b2, b2, rng))?;
            store.insert(format!("{p}.ffn.b2"), Tensor::zeros(&[d]))?;
        }
        conv(&mut store, &format!("g{g}.conv"), d, d, rng)?;
    }
    conv(&mut store, "body", d, d, rng)?;
    conv(&mut store, "head", d, cfg.head_channels(), rng)?;
    Ok(store)
}

fn conv3<T: Scalar>(tape: &Tape<T>, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let y = tape.conv2d(x, p.get(&format!("{name}.weight"))?, PadMode::Zero)?;
    tape.add_bias(y, p.get(&format!("{name}.bias"))?)
}

fn ffn<T: Scalar>(tape: &Tape<T>, x: Var, p: &Bound, prefix: &str) -> Result<Var> {
    let shape = tape.shape(x);
    let (h, w, d) = (shape[0], shape[1], shape[2]);
    let rows = tape.reshape(x, &[h * w, d])?;
    let y = tape.matmul(rows, p.get(&format!("{prefix}.w1"))?)?;
    let y = tape.add_bias(y, p.get(&format!("{prefix}.b1"))?)?;
    let y = tape.gelu(y)?;
    let y = tape.matmul(y, p.get(&format!("{prefix}.w2"))?)?;
    let y = tape.add_bias(y, p.get(&format!("{prefix}.b2"))?)?;
    tape.reshape(y, &[h, w, d])
}

fn attention<T: Scalar>(tape: &Tape<T>, x: Var, cfg: &ModelConfig, p: &Bound, prefix: &str, block: usize) -> Result<Var> {
    let get = |n: &str| p.get(&format!("{prefix}.{n}"));
    match cfg.variant {
        Variant::Tea => {
            let vars = AttnVars {
                w_q: get("w_q")?,
                w_k: get("w_k")?,
                w_v: get("w_v")?,
                offset_k_kernel: get("offset_k.kernel")?,
                offset_k_reduce: get("offset_k.reduce")?,
                offset_v_kernel: get("offset_v.kernel")?,
                offset_v_reduce: get("offset_v.reduce")?,
                alpha_s: get("alpha_s")?,
                alpha_d: get("alpha_d")?,
            };
            graph::tea(tape, x, &vars, &cfg.spec)
        }
        Variant::Wa => {
            let shift = if block % 2 == 1 { cfg.window / 2 } else { 0 };
            windowed::window_partition_attention(
                tape,
                x,
                [get("w_q")?, get("w_k")?, get("w_v")?],
                get("bias_table")?,
                cfg.window,
                shift,
            )
        }
    }
}

/// Shallow feature extraction: one 3×3 conv from RGB to `D` channels.
pub fn shallow_graph<T: Scalar>(tape: &Tape<T>, img: Var, p: &Bound) -> Result<Var> {
    conv3(tape, img, p, "shallow")
}

/// Groups of blocks, each group wrapped in a residual, then the body conv.
pub fn deep_graph<T: Scalar>(tape: &Tape<T>, f0: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let mut x = f0;
    for g in 0..cfg.n_groups {
        let mut y = x;
        for b in 0..cfg.n_blocks {
            let prefix = format!("g{g}.b{b}");
            let a = attention(tape, y, cfg, p, &format!("{prefix}.attn"), b)?;
            y = tape.add(y, a)?;
            let f = ffn(tape, y, p, &format!("{prefix}.ffn"))?;
            y = tape.add(y, f)?;
        }
        y = conv3(tape, y, p, &format!("g{g}.conv"))?;
        x = tape.add(x, y)?;
    }
    conv3(tape, x, p, "body")
}

/// Head conv to `3·r²` channels followed by the sub-pixel rearrangement.
/// [`forward_graph`] adds the input image on top when `r = 1`.
pub fn restore_graph<T: Scalar>(tape: &Tape<T>, features: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let y = conv3(tape, features, p, "head")?;
    tape.pixel_shuffle(y, cfg.scale)
}

pub fn forward_graph<T: Scalar>(tape: &Tape<T>, img: Var, cfg: &ModelConfig, p: &Bound) -> Result<Var> {
    let f0 = shallow_graph(tape, img, p)?;
    let f1 = deep_graph(tape, f0, cfg, p)?;
    let fr = tape.add(f0, f1)?;
    let out = restore_graph(tape, fr, cfg, p)?;
    if cfg.scale == 1 {
        tape.add(img, out)
    } else {
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Random initialization from a ChaCha8 stream seeded with `seed`.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&cfg, &mut rng)?;
        Ok(Self { cfg, params })
    }

    /// Wraps loaded parameters after checking them against the layout.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let expected = layout(&cfg);
        if expected.len() != params.len() {
            return shape_err("Model", format!("{} tensors, layout has {}", params.len(), expected.len()));
        }
        for ((name, shape), (got, t)) in expected.iter().zip(params.iter()) {
            if name != got || shape.as_slice() != t.shape() {
                return shape_err("Model", format!("expected {name} {shape:?}, found {got} {:?}", t.shape()));
            }
        }
        Ok(Self { cfg, params })
    }

    fn check_image(&self, img: &Tensor<T>) -> Result<()> {
        let (h, w, c) = img.dims3("Model::forward")?;
        if c != 3 {
            return shape_err("Model::forward", format!("expected 3 channels, got {c}"));
        }
        self.cfg.validate_input(h, w)
    }

    fn run(&self, img: &Tensor<T>, f: impl FnOnce(&Tape<T>, Var, &Bound) -> Result<Var>) -> Result<Tensor<T>> {
        self.run_reach(img, f).map(|(t, _)| t)
    }

    fn run_reach(
        &self,
        img: &Tensor<T>,
        f: impl FnOnce(&Tape<T>, Var, &Bound) -> Result<Var>,
    ) -> Result<(Tensor<T>, usize)> {
        let tape = Tape::new();
        let x = tape.constant(img.clone());
        let p = self.params.bind(&tape, false);
        let out = f(&tape, x, &p)?;
        let value = (*tape.value(out)).clone();
        value.ensure_finite("model output")?;
        Ok((value, tape.gather_reach()))
    }

    pub fn forward(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(img)?;
        self.run(img, |t, x, p| forward_graph(t, x, &self.cfg, p))
    }

    /// Forward pass plus the largest displacement any block's offsets applied.
    pub fn forward_with_reach(&self, img: &Tensor<T>) -> Result<(Tensor<T>, usize)> {
        self.check_image(img)?;
        self.run_reach(img, |t, x, p| forward_graph(t, x, &self.cfg, p))
    }

    pub fn shallow_features(&self, img: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_image(img)?;
        self.run(img, |t, x, p| shallow_graph(t, x, p))
    }

    /// Applies only the restoration head to `D`-channel features.
    pub fn restore(&self, features: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(features, |t, x, p| restore_graph(t, x, &self.cfg, p))
    }

    /// Zeroes the body conv so the deep path contributes nothing.
    pub fn zero_deep_path(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.starts_with("body.") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    /// Zeroes every block's global branch weight.
    pub fn mute_global_branch(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".alpha_d") {
                *t = Tensor::zeros(t.shape());
            }
        }
    }

    fn global_branch_muted(&self) -> bool {
        self.params
            .iter()
            .filter(|(name, _)| name.ends_with(".alpha_d"))
            .all(|(_, t)| t.data().iter().all(|v| *v == T::zero()))
    }

    /// Parameter count by enumeration.
    pub fn numel(&self) -> usize {
        self.params.numel()
    }

    /// Shift margin of the whole network, given a bound on how far any
    /// block's rounded offsets move a pixel.
    pub fn margin(&self, height: usize, width: usize, reach: usize) -> Margin {
        let cfg = &self.cfg;
        let attn = match cfg.variant {
            Variant::Tea if self.global_branch_muted() => Margin::adaptive(&cfg.spec, reach),
            Variant::Tea => Margin::combined(&cfg.spec, reach, height, width, false),
            Variant::Wa => Margin::global(cfg.window),
        };
        let block = Margin::pointwise().alongside(attn).then(Margin::pointwise());
        let mut group = Margin::pointwise();
        for _ in 0..cfg.n_blocks {
            group = group.then(block);
        }
        let group = Margin::pointwise().alongside(group.then(Margin::conv(3)));
        let mut deep = Margin::pointwise();
        for _ in 0..cfg.n_groups {
            deep = deep.then(group);
        }
        Margin::conv(3)
            .then(Margin::pointwise().alongside(deep.then(Margin::conv(3))))
            .then(Margin::conv(3))
    }
}
