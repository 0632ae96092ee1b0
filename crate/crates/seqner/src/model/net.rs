//! Encoder/decoder forward passes.
//!
//! The encoder is a standard multi-head transformer stack; with entity
//! type attention enabled, every self-attention layer sees `|T|` extra
//! key/value slots projected from the type table. The relation head
//! builds conditional-layer-norm pair representations from the final
//! encoder states, supervises them with a 3-class head, and (with token
//! relation attention) convolves the pair grid into per-token key/value
//! slots for the decoder's cross-attention. The decoder points at source
//! positions, type slots, and a learned end-of-sequence vector.

use crate::corpus::PointerTarget;
use crate::error::TensorError;
use crate::graph::{Graph, Var};
use crate::model::config::ModelConfig;
use crate::model::params::{ParamId, ParamStore};
use crate::seeds;
use crate::tensor::Tensor;

struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

struct LnIds {
    gamma: ParamId,
    beta: ParamId,
}

struct FfnIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-layer projection producing extra key/value slots.
struct KvIds {
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
}

struct EncLayerIds {
    attn: AttnIds,
    ln1: LnIds,
    ffn: FfnIds,
    ln2: LnIds,
    eta: Option<KvIds>,
}

struct DecLayerIds {
    self_attn: AttnIds,
    ln1: LnIds,
    cross_attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
    ln3: LnIds,
    eta_self: Option<KvIds>,
    eta_cross: Option<KvIds>,
    /// Relation-feature K/V maps (linear, bias-free).
    tra: Option<(ParamId, ParamId)>,
}

struct ClnIds {
    w_alpha: ParamId,
    b_alpha: ParamId,
    w_beta: ParamId,
    b_beta: ParamId,
}

struct Ids {
    embed: ParamId,
    enc: Vec<EncLayerIds>,
    dec: Vec<DecLayerIds>,
    cln: Option<ClnIds>,
    rel_reduce: Option<(ParamId, ParamId)>,
    rel_mlp: Option<FfnIds>,
    conv: Option<(ParamId, ParamId)>,
    type_mlp: Option<FfnIds>,
    start: ParamId,
    eos: ParamId,
}

pub struct Model {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    /// `|T| x vocab` constant mixing matrix; the type table is
    /// `lex_weights · embedding`, sharing the token embedding table.
    pub lex_weights: Tensor,
    ids: Ids,
}

/// One forward pass: a fresh graph with every parameter bound as a leaf.
pub struct Ctx {
    pub g: Graph,
    pvars: Vec<Var>,
    /// Diagnostic: additively mask every extra (type/relation) attention
    /// slot to -1e9, which must reproduce the baseline model.
    pub mask_extra: bool,
    /// Slot width of every attention call, recorded for structural tests.
    pub attn_widths: Vec<usize>,
}

pub struct EncoderOutput {
    /// `N x d_h` contextual token matrix.
    pub h: Var,
    /// `N^2 x d_rel` relation representations, row-major over (i, j).
    pub r: Option<Var>,
    pub n: usize,
}

struct TypeBanks {
    enc: Vec<(Var, Var)>,
    dec_self: Vec<(Var, Var)>,
    dec_cross: Vec<(Var, Var)>,
}

/// Everything the decoder and the loss heads need from the encoder side.
pub struct ForwardState {
    pub enc: EncoderOutput,
    pub et: Var,
    token_ids: Vec<usize>,
    type_banks: Option<TypeBanks>,
    rel_bank: Option<Vec<(Var, Var)>>,
}

const INIT_STD: f64 = 0.02;

impl Model {
    /// Builds a model with seeded Gaussian init. `lex_weights` must be a
    /// `[n_types, vocab_size]` mixing matrix (see `lexicon`).
    pub fn new(cfg: ModelConfig, lex_weights: Tensor, seed: u64) -> Result<Self, crate::Error> {
        cfg.validate()?;
        if lex_weights.shape != [cfg.n_types, cfg.vocab_size] {
            return Err(crate::Error::InvalidConfig(format!(
                "lexicon weights shape {:?} does not match [n_types={}, vocab={}]",
                lex_weights.shape, cfg.n_types, cfg.vocab_size
            )));
        }
        let rng = &mut seeds::rng_for(seed, "init");
        let mut p = ParamStore::new();
        let d = cfg.d_h;

        let embed = p.add_randn("embed.tok", vec![cfg.vocab_size, d], INIT_STD, rng);

        let attn_ids = |p: &mut ParamStore, rng: &mut _, prefix: &str| AttnIds {
            wq: p.add_randn(format!("{prefix}.wq"), vec![d, d], INIT_STD, rng),
            bq: p.add_zeros(format!("{prefix}.bq"), vec![d]),
            wk: p.add_randn(format!("{prefix}.wk"), vec![d, d], INIT_STD, rng),
            bk: p.add_zeros(format!("{prefix}.bk"), vec![d]),
            wv: p.add_randn(format!("{prefix}.wv"), vec![d, d], INIT_STD, rng),
            bv: p.add_zeros(format!("{prefix}.bv"), vec![d]),
            wo: p.add_randn(format!("{prefix}.wo"), vec![d, d], INIT_STD, rng),
            bo: p.add_zeros(format!("{prefix}.bo"), vec![d]),
        };
        let ln_ids = |p: &mut ParamStore, prefix: &str| LnIds {
            gamma: p.add_full(format!("{prefix}.gamma"), vec![d], 1.0),
            beta: p.add_zeros(format!("{prefix}.beta"), vec![d]),
        };
        let ffn_ids = |p: &mut ParamStore, rng: &mut _, prefix: &str| FfnIds {
            w1: p.add_randn(format!("{prefix}.w1"), vec![d, cfg.d_ff], INIT_STD, rng),
            b1: p.add_zeros(format!("{prefix}.b1"), vec![cfg.d_ff]),
            w2: p.add_randn(format!("{prefix}.w2"), vec![cfg.d_ff, d], INIT_STD, rng),
            b2: p.add_zeros(format!("{prefix}.b2"), vec![d]),
        };
        let kv_ids = |p: &mut ParamStore, rng: &mut _, prefix: &str| KvIds {
            wk: p.add_randn(format!("{prefix}.wk"), vec![cfg.d_up, d], INIT_STD, rng),
            bk: p.add_zeros(format!("{prefix}.bk"), vec![d]),
            wv: p.add_randn(format!("{prefix}.wv"), vec![cfg.d_up, d], INIT_STD, rng),
            bv: p.add_zeros(format!("{prefix}.bv"), vec![d]),
        };

        let enc = (0..cfg.n_layers_enc)
            .map(|l| EncLayerIds {
                attn: attn_ids(&mut p, rng, &format!("enc.l{l}.attn")),
                ln1: ln_ids(&mut p, &format!("enc.l{l}.ln1")),
                ffn: ffn_ids(&mut p, rng, &format!("enc.l{l}.ffn")),
                ln2: ln_ids(&mut p, &format!("enc.l{l}.ln2")),
                eta: cfg
                    .use_eta
                    .then(|| kv_ids(&mut p, rng, &format!("eta.enc.l{l}"))),
            })
            .collect();

        let dec = (0..cfg.n_layers_dec)
            .map(|l| DecLayerIds {
                self_attn: attn_ids(&mut p, rng, &format!("dec.l{l}.self")),
                ln1: ln_ids(&mut p, &format!("dec.l{l}.ln1")),
                cross_attn: attn_ids(&mut p, rng, &format!("dec.l{l}.cross")),
                ln2: ln_ids(&mut p, &format!("dec.l{l}.ln2")),
                ffn: ffn_ids(&mut p, rng, &format!("dec.l{l}.ffn")),
                ln3: ln_ids(&mut p, &format!("dec.l{l}.ln3")),
                eta_self: cfg
                    .use_eta
                    .then(|| kv_ids(&mut p, rng, &format!("eta.dec_self.l{l}"))),
                eta_cross: cfg
                    .use_eta
                    .then(|| kv_ids(&mut p, rng, &format!("eta.dec_cross.l{l}"))),
                tra: cfg.use_tra.then(|| {
                    (
                        p.add_randn(
                            format!("tra.dec.l{l}.wk"),
                            vec![cfg.d_rel, d],
                            INIT_STD,
                            rng,
                        ),
                        p.add_randn(
                            format!("tra.dec.l{l}.wv"),
                            vec![cfg.d_rel, d],
                            INIT_STD,
                            rng,
                        ),
                    )
                }),
            })
            .collect();

        let cln = cfg.use_rp.then(|| ClnIds {
            w_alpha: p.add_randn("cln.walpha", vec![d, d], INIT_STD, rng),
            b_alpha: p.add_full("cln.balpha", vec![d], 1.0),
            w_beta: p.add_randn("cln.wbeta", vec![d, d], INIT_STD, rng),
            b_beta: p.add_zeros("cln.bbeta", vec![d]),
        });
        let rel_reduce = cfg.use_rp.then(|| {
            (
                p.add_randn("rel.reduce.w", vec![d, cfg.d_rel], INIT_STD, rng),
                p.add_zeros("rel.reduce.b", vec![cfg.d_rel]),
            )
        });
        let rel_mlp = cfg.use_rp.then(|| FfnIds {
            w1: p.add_randn("rel.mlp.w1", vec![cfg.d_rel, cfg.d_rel], INIT_STD, rng),
            b1: p.add_zeros("rel.mlp.b1", vec![cfg.d_rel]),
            w2: p.add_randn("rel.mlp.w2", vec![cfg.d_rel, 3], INIT_STD, rng),
            b2: p.add_zeros("rel.mlp.b2", vec![3]),
        });
        let conv = cfg.use_tra.then(|| {
            (
                p.add_randn(
                    "tra.conv.kernel",
                    vec![cfg.conv_kernel, cfg.conv_kernel, cfg.d_rel, cfg.d_rel],
                    INIT_STD,
                    rng,
                ),
                p.add_zeros("tra.conv.bias", vec![cfg.d_rel]),
            )
        });
        let type_mlp = cfg.use_eta.then(|| FfnIds {
            w1: p.add_randn("typemlp.wdown", vec![d, cfg.d_down], INIT_STD, rng),
            b1: p.add_zeros("typemlp.bdown", vec![cfg.d_down]),
            w2: p.add_randn("typemlp.wup", vec![cfg.d_down, cfg.d_up], INIT_STD, rng),
            b2: p.add_zeros("typemlp.bup", vec![cfg.d_up]),
        });

        let start = p.add_randn("out.start", vec![1, d], INIT_STD, rng);
        let eos = p.add_randn("out.eos", vec![1, d], INIT_STD, rng);

        Ok(Model {
            ids: Ids {
                embed,
                enc,
                dec,
                cln,
                rel_reduce,
                rel_mlp,
                conv,
                type_mlp,
                start,
                eos,
            },
            cfg,
            params: p,
            lex_weights,
        })
    }

    pub fn eos_index(&self, n_tokens: usize) -> usize {
        n_tokens + self.cfg.n_types
    }

    /// Opens a fresh graph with all parameters bound as gradient leaves.
    pub fn ctx(&self) -> Ctx {
        let mut g = Graph::new();
        let pvars = self
            .params
            .ids()
            .map(|id| g.leaf(self.params.get(id).clone(), true))
            .collect();
        Ctx {
            g,
            pvars,
            mask_extra: false,
            attn_widths: Vec::new(),
        }
    }

    /// Graph var bound to a parameter in this ctx.
    pub fn param_var(&self, ctx: &Ctx, id: ParamId) -> Var {
        ctx.pvars[id.0]
    }

    fn pv(&self, ctx: &Ctx, id: ParamId) -> Var {
        ctx.pvars[id.0]
    }

    fn linear(&self, ctx: &mut Ctx, x: Var, w: ParamId, b: Option<ParamId>) -> Result<Var, TensorError> {
        let y = ctx.g.matmul(x, self.pv(ctx, w))?;
        match b {
            Some(b) => {
                let bv = self.pv(ctx, b);
                ctx.g.add_row(y, bv)
            }
            None => Ok(y),
        }
    }

    fn layer_norm(&self, ctx: &mut Ctx, x: Var, ln: &LnIds) -> Result<Var, TensorError> {
        let n = ctx.g.normalize_rows(x, self.cfg.eps_ln)?;
        let g = ctx.g.mul_row(n, self.pv(ctx, ln.gamma))?;
        ctx.g.add_row(g, self.pv(ctx, ln.beta))
    }

    fn ffn(&self, ctx: &mut Ctx, x: Var, ids: &FfnIds) -> Result<Var, TensorError> {
        let h = self.linear(ctx, x, ids.w1, Some(ids.b1))?;
        let h = ctx.g.relu(h)?;
        self.linear(ctx, h, ids.w2, Some(ids.b2))
    }

    /// Scaled dot-product multi-head attention with optional extra K/V
    /// slot blocks prepended to the keys (in the order given) and an
    /// optional causal mask over the sequence part. Extra slots are never
    /// causally masked; `ctx.mask_extra` masks them all instead.
    fn attention(
        &self,
        ctx: &mut Ctx,
        q_in: Var,
        kv_in: Var,
        ids: &AttnIds,
        extra: &[(Var, Var)],
        causal: bool,
    ) -> Result<Var, TensorError> {
        let q = self.linear(ctx, q_in, ids.wq, Some(ids.bq))?;
        let k = self.linear(ctx, kv_in, ids.wk, Some(ids.bk))?;
        let v = self.linear(ctx, kv_in, ids.wv, Some(ids.bv))?;
        let m = ctx.g.shape(q)[0];
        let n = ctx.g.shape(k)[0];
        let extra_len: usize = extra.iter().map(|&(ek, _)| ctx.g.shape(ek)[0]).sum();
        let total = extra_len + n;
        ctx.attn_widths.push(total);

        let mask = if causal || (ctx.mask_extra && extra_len > 0) {
            let mut mk = vec![0.0; m * total];
            for qi in 0..m {
                if ctx.mask_extra {
                    for s in 0..extra_len {
                        mk[qi * total + s] = -1e9;
                    }
                }
                if causal {
                    for kj in 0..n {
                        if kj > qi {
                            mk[qi * total + extra_len + kj] = -1e9;
                        }
                    }
                }
            }
            Some(ctx.g.constant(Tensor {
                shape: vec![m, total],
                data: mk,
                grad: None,
                requires_grad: false,
            }))
        } else {
            None
        };

        let dh = self.cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = ctx.g.slice_cols(q, h * dh, dh)?;
            let kh = ctx.g.slice_cols(k, h * dh, dh)?;
            let vh = ctx.g.slice_cols(v, h * dh, dh)?;
            let mut kparts = Vec::with_capacity(extra.len() + 1);
            let mut vparts = Vec::with_capacity(extra.len() + 1);
            for &(ek, ev) in extra {
                kparts.push(ctx.g.slice_cols(ek, h * dh, dh)?);
                vparts.push(ctx.g.slice_cols(ev, h * dh, dh)?);
            }
            kparts.push(kh);
            vparts.push(vh);
            let keys = if kparts.len() == 1 {
                kparts[0]
            } else {
                ctx.g.concat(&kparts, 0)?
            };
            let vals = if vparts.len() == 1 {
                vparts[0]
            } else {
                ctx.g.concat(&vparts, 0)?
            };
            let kt = ctx.g.transpose(keys)?;
            let mut scores = ctx.g.matmul(qh, kt)?;
            scores = ctx.g.scale(scores, scale)?;
            if let Some(mv) = mask {
                scores = ctx.g.add(scores, mv)?;
            }
            let probs = ctx.g.softmax(scores, 1)?;
            heads.push(ctx.g.matmul(probs, vals)?);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            ctx.g.concat(&heads, 1)?
        };
        self.linear(ctx, merged, ids.wo, Some(ids.bo))
    }

    /// Type table `E_T = lex_weights · embedding`, recomputed in-graph so
    /// gradients reach the shared embedding (unless frozen).
    pub fn type_table(&self, ctx: &mut Ctx) -> Result<Var, TensorError> {
        let w = ctx.g.constant(self.lex_weights.clone());
        let embed = if self.cfg.freeze_type_embeddings {
            ctx.g.constant(self.params.get(self.ids.embed).clone())
        } else {
            self.pv(ctx, self.ids.embed)
        };
        ctx.g.matmul(w, embed)
    }

    /// Down/up type MLP and per-layer K/V projections (Eq.-9-style slots).
    fn type_banks(&self, ctx: &mut Ctx, et: Var) -> Result<Option<TypeBanks>, TensorError> {
        let Some(mlp) = &self.ids.type_mlp else {
            return Ok(None);
        };
        let h = self.linear(ctx, et, mlp.w1, Some(mlp.b1))?;
        let h = ctx.g.relu(h)?;
        let u = self.linear(ctx, h, mlp.w2, Some(mlp.b2))?;
        let mut project = |ctx: &mut Ctx, kv: &KvIds| -> Result<(Var, Var), TensorError> {
            Ok((
                self.linear(ctx, u, kv.wk, Some(kv.bk))?,
                self.linear(ctx, u, kv.wv, Some(kv.bv))?,
            ))
        };
        let mut enc = Vec::new();
        for l in &self.ids.enc {
            enc.push(project(ctx, l.eta.as_ref().expect("eta ids"))?);
        }
        let mut dec_self = Vec::new();
        let mut dec_cross = Vec::new();
        for l in &self.ids.dec {
            dec_self.push(project(ctx, l.eta_self.as_ref().expect("eta ids"))?);
            dec_cross.push(project(ctx, l.eta_cross.as_ref().expect("eta ids"))?);
        }
        Ok(Some(TypeBanks {
            enc,
            dec_self,
            dec_cross,
        }))
    }

    /// Conditional layer norm of `h_j` gained/biased by projections of
    /// `h_i`; both inputs are `[rows x d_h]` and are combined row-wise.
    pub fn cln(&self, ctx: &mut Ctx, h_i: Var, h_j: Var) -> Result<Var, TensorError> {
        let cln = self.ids.cln.as_ref().ok_or(TensorError::Invalid(
            "cln parameters absent (use_rp = false)".into(),
        ))?;
        let gamma = self.linear(ctx, h_i, cln.w_alpha, Some(cln.b_alpha))?;
        let lambda = self.linear(ctx, h_i, cln.w_beta, Some(cln.b_beta))?;
        let normed = ctx.g.normalize_rows(h_j, self.cfg.eps_ln)?;
        let gained = ctx.g.mul(gamma, normed)?;
        ctx.g.add(gained, lambda)
    }

    /// Relation representations for all ordered pairs: `[N^2 x d_rel]`
    /// with row i*N+j holding the reduced CLN(h_i, h_j).
    fn relation_representations(&self, ctx: &mut Ctx, h: Var, n: usize) -> Result<Var, TensorError> {
        let h_i = ctx.g.repeat_rows_interleave(h, n)?;
        let h_j = ctx.g.tile_rows(h, n)?;
        let r = self.cln(ctx, h_i, h_j)?;
        let (w, b) = self.ids.rel_reduce.as_ref().expect("rel_reduce ids");
        self.linear(ctx, r, *w, Some(*b))
    }

    /// Two-layer MLP over relation representations: `[N^2 x 3]` logits.
    pub fn relation_logits(&self, ctx: &mut Ctx, r: Var) -> Result<Var, TensorError> {
        let mlp = self.ids.rel_mlp.as_ref().ok_or(TensorError::Invalid(
            "relation head absent (use_rp = false)".into(),
        ))?;
        self.ffn(ctx, r, mlp)
    }

    /// Convolves the pair grid, max-pools over rows, and projects one
    /// (K_R, V_R) pair per decoder layer.
    fn relation_bank(
        &self,
        ctx: &mut Ctx,
        r: Var,
        n: usize,
    ) -> Result<Vec<(Var, Var)>, TensorError> {
        let d_rel = self.cfg.d_rel;
        let (kernel, bias) = self.ids.conv.as_ref().expect("conv ids");
        let grid = ctx.g.reshape(r, vec![n, n, d_rel])?;
        let conv = ctx.g.conv2d_same(grid, self.pv(ctx, *kernel))?;
        let flat = ctx.g.reshape(conv, vec![n * n, d_rel])?;
        let flat = ctx.g.add_row(flat, self.pv(ctx, *bias))?;
        let flat = ctx.g.relu(flat)?;
        let grid = ctx.g.reshape(flat, vec![n, n, d_rel])?;
        let pooled = ctx.g.max_pool_axis0(grid)?;
        let mut bank = Vec::with_capacity(self.ids.dec.len());
        for l in &self.ids.dec {
            let (wk, wv) = l.tra.as_ref().expect("tra ids");
            bank.push((
                self.linear(ctx, pooled, *wk, None)?,
                self.linear(ctx, pooled, *wv, None)?,
            ));
        }
        Ok(bank)
    }

    /// Encoder plus every bank the decoder needs.
    pub fn forward_encoder(
        &self,
        ctx: &mut Ctx,
        token_ids: &[usize],
    ) -> Result<ForwardState, TensorError> {
        if token_ids.is_empty() {
            return Err(TensorError::Invalid("cannot encode an empty sentence".into()));
        }
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(TensorError::Invalid(format!(
                "token id {bad} out of range for vocab {}",
                self.cfg.vocab_size
            )));
        }
        let n = token_ids.len();
        let et = self.type_table(ctx)?;
        let type_banks = self.type_banks(ctx, et)?;

        let emb = ctx.g.gather_rows(self.pv(ctx, self.ids.embed), token_ids)?;
        let pos = ctx.g.constant(positional(n, self.cfg.d_h));
        let mut x = ctx.g.add(emb, pos)?;
        for (l, layer) in self.ids.enc.iter().enumerate() {
            let extra: Vec<(Var, Var)> = match &type_banks {
                Some(tb) => vec![tb.enc[l]],
                None => vec![],
            };
            let a = self.attention(ctx, x, x, &layer.attn, &extra, false)?;
            let x1 = ctx.g.add(x, a)?;
            let x1 = self.layer_norm(ctx, x1, &layer.ln1)?;
            let f = self.ffn(ctx, x1, &layer.ffn)?;
            let x2 = ctx.g.add(x1, f)?;
            x = self.layer_norm(ctx, x2, &layer.ln2)?;
        }

        let r = if self.cfg.use_rp {
            Some(self.relation_representations(ctx, x, n)?)
        } else {
            None
        };
        let rel_bank = if self.cfg.use_tra {
            Some(self.relation_bank(ctx, r.expect("use_tra implies use_rp"), n)?)
        } else {
            None
        };
        Ok(ForwardState {
            enc: EncoderOutput { h: x, r, n },
            et,
            token_ids: token_ids.to_vec(),
            type_banks,
            rel_bank,
        })
    }

    /// Runs the decoder over `[start] ++ embed(input_indices)` with causal
    /// self-attention and returns the pointer distribution for every
    /// position: `[len+1 x (N + |T| + 1)]`, each row softmax-normalized.
    pub fn decode_probs(
        &self,
        ctx: &mut Ctx,
        st: &ForwardState,
        input_indices: &[usize],
    ) -> Result<Var, TensorError> {
        let n = st.enc.n;
        let n_types = self.cfg.n_types;
        if let Some(&bad) = input_indices.iter().find(|&&i| i >= n + n_types) {
            return Err(TensorError::Invalid(format!(
                "previous index {bad} out of range (N={n}, |T|={n_types})"
            )));
        }
        let source_rows = if self.cfg.pointer_input_from_encoder {
            st.enc.h
        } else {
            ctx.g
                .gather_rows(self.pv(ctx, self.ids.embed), &st.token_ids)?
        };
        let pointer_table = ctx.g.concat(&[source_rows, st.et], 0)?;
        let start_row = self.pv(ctx, self.ids.start);
        let x0 = if input_indices.is_empty() {
            start_row
        } else {
            let prev = ctx.g.gather_rows(pointer_table, input_indices)?;
            ctx.g.concat(&[start_row, prev], 0)?
        };
        let m = input_indices.len() + 1;
        let pos = ctx.g.constant(positional(m, self.cfg.d_h));
        let mut x = ctx.g.add(x0, pos)?;

        for (l, layer) in self.ids.dec.iter().enumerate() {
            let self_extra: Vec<(Var, Var)> = match &st.type_banks {
                Some(tb) => vec![tb.dec_self[l]],
                None => vec![],
            };
            let a = self.attention(ctx, x, x, &layer.self_attn, &self_extra, true)?;
            let x1 = ctx.g.add(x, a)?;
            let x1 = self.layer_norm(ctx, x1, &layer.ln1)?;

            // Cross-attention keys: [K_R; K_T; K] when every flag is on.
            let mut cross_extra: Vec<(Var, Var)> = Vec::new();
            if let Some(bank) = &st.rel_bank {
                cross_extra.push(bank[l]);
            }
            if let Some(tb) = &st.type_banks {
                cross_extra.push(tb.dec_cross[l]);
            }
            let c = self.attention(ctx, x1, st.enc.h, &layer.cross_attn, &cross_extra, false)?;
            let x2 = ctx.g.add(x1, c)?;
            let x2 = self.layer_norm(ctx, x2, &layer.ln2)?;

            let f = self.ffn(ctx, x2, &layer.ffn)?;
            let x3 = ctx.g.add(x2, f)?;
            x = self.layer_norm(ctx, x3, &layer.ln3)?;
        }

        let eos_row = self.pv(ctx, self.ids.eos);
        let out_table = ctx.g.concat(&[st.enc.h, st.et, eos_row], 0)?;
        let out_t = ctx.g.transpose(out_table)?;
        let scores = ctx.g.matmul(x, out_t)?;
        ctx.g.softmax(scores, 1)
    }

    /// Teacher-forced pass: per-step pointer distributions for the whole
    /// gold sequence plus the relation logits the losses need.
    pub fn forward_teacher_forced(
        &self,
        ctx: &mut Ctx,
        token_ids: &[usize],
        gold: &PointerTarget,
    ) -> Result<(Var, Option<Var>), TensorError> {
        if gold.indices.is_empty() {
            return Err(TensorError::Invalid("empty gold target".into()));
        }
        let st = self.forward_encoder(ctx, token_ids)?;
        let probs = self.decode_probs(ctx, &st, &gold.indices[..gold.indices.len() - 1])?;
        let logits = match st.enc.r {
            Some(r) => Some(self.relation_logits(ctx, r)?),
            None => None,
        };
        Ok((probs, logits))
    }

    /// Argmax decoding until EOS or `max_len` indices; ties break to the
    /// lowest index. The returned target includes the EOS unless the
    /// length cap truncates first.
    pub fn greedy_generate(
        &self,
        token_ids: &[usize],
        max_len: usize,
    ) -> Result<PointerTarget, TensorError> {
        let mut ctx = self.ctx();
        let st = self.forward_encoder(&mut ctx, token_ids)?;
        let eos = self.eos_index(st.enc.n);
        let mut out: Vec<usize> = Vec::new();
        while out.len() < max_len {
            let probs = self.decode_probs(&mut ctx, &st, &out)?;
            let rows = ctx.g.shape(probs)[0];
            let last = ctx.g.value(probs).row(rows - 1);
            let best = argmax_first(last);
            out.push(best);
            if best == eos {
                break;
            }
        }
        Ok(PointerTarget { indices: out })
    }

    /// Argmax relation-grid prediction, `N^2` class ids row-major.
    pub fn predict_relation_classes(&self, token_ids: &[usize]) -> Result<Vec<usize>, TensorError> {
        let mut ctx = self.ctx();
        let st = self.forward_encoder(&mut ctx, token_ids)?;
        let r = st.enc.r.ok_or(TensorError::Invalid(
            "relation prediction disabled (use_rp = false)".into(),
        ))?;
        let logits = self.relation_logits(&mut ctx, r)?;
        let t = ctx.g.value(logits);
        Ok((0..t.shape[0]).map(|i| argmax_first(t.row(i))).collect())
    }
}

fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Sinusoidal positional encoding, `[n x d]`.
pub fn positional(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
            let angle = p as f64 * rate;
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor {
        shape: vec![n, d],
        data,
        grad: None,
        requires_grad: false,
    }
}
