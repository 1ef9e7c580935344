use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::rng::Rng;
use crate::tensor::{ParamId, ParamStore, Tensor};

/// `log_softmax(out(FF2(ReLU(FF1(ReLU(P_e e + P_s s))))))` over blank plus
/// `V` labels. When tied, label logits use the prediction network's
/// embedding table and only the blank column is a free weight.
#[derive(Clone, Debug)]
pub struct Joiner {
    enc_proj: Linear,
    pn_proj: Linear,
    ff1: Linear,
    ff2: Linear,
    out: Output,
    dim: usize,
    vocab: usize,
}

#[derive(Clone, Debug)]
enum Output {
    Free(Linear),
    Tied { blank: ParamId, bias: ParamId, embed: ParamId },
}

impl Joiner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        enc_dim: usize,
        pn_dim: usize,
        dim: usize,
        vocab: usize,
        tied_embedding: Option<ParamId>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let enc_proj = Linear::new(store, &format!("{prefix}.enc_proj"), enc_dim, dim, true, rng)?;
        let pn_proj = Linear::new(store, &format!("{prefix}.pn_proj"), pn_dim, dim, false, rng)?;
        let ff1 = Linear::new(store, &format!("{prefix}.ff1"), dim, dim, true, rng)?;
        let ff2 = Linear::new(store, &format!("{prefix}.ff2"), dim, dim, true, rng)?;
        let out = match tied_embedding {
            None => Output::Free(Linear::new(store, &format!("{prefix}.out"), dim, vocab + 1, true, rng)?),
            Some(embed) => {
                let e = store.get(embed).shape().to_vec();
                if e != [vocab, dim] {
                    return Err(Error::config(
                        "joiner.dim",
                        format!("tied output needs an embedding of shape [{vocab}, {dim}], got {e:?}"),
                    ));
                }
                let bound = 1.0 / (dim as f64).sqrt();
                Output::Tied {
                    blank: store.add(format!("{prefix}.out.blank"), Tensor::uniform(&[dim, 1], bound, rng)?)?,
                    bias: store.add(format!("{prefix}.out.bias"), Tensor::zeros(&[vocab + 1])?)?,
                    embed,
                }
            }
        };
        Ok(Self {
            enc_proj,
            pn_proj,
            ff1,
            ff2,
            out,
            dim,
            vocab,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn project_encoder(&self, tape: &mut Tape, e: Var) -> Result<Var> {
        self.enc_proj.forward(tape, e)
    }

    pub fn project_pn(&self, tape: &mut Tape, s: Var) -> Result<Var> {
        self.pn_proj.forward(tape, s)
    }

    /// Log-probabilities for already projected and summed rows `[n x D_j]`.
    pub fn combine(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let h = tape.relu(z)?;
        let h = self.ff1.forward(tape, h)?;
        let h = tape.relu(h)?;
        let h = self.ff2.forward(tape, h)?;
        let logits = match &self.out {
            Output::Free(l) => l.forward(tape, h)?,
            Output::Tied { blank, bias, embed } => {
                let b = tape.param(*blank);
                let e = tape.param(*embed);
                let et = tape.transpose(e)?;
                let w = tape.concat_cols(&[b, et])?;
                let y = tape.matmul(h, w)?;
                let bias = tape.param(*bias);
                tape.add_row(y, bias)?
            }
        };
        tape.log_softmax(logits, 1)
    }

    /// Full lattice `[T' x (U+1) x (V+1)]` from encoder rows and PN states.
    pub fn lattice(&self, tape: &mut Tape, enc: Var, states: Var) -> Result<Var> {
        let t = tape.shape(enc)[0];
        let u = tape.shape(states)[0];
        let pe = self.project_encoder(tape, enc)?;
        let ps = self.project_pn(tape, states)?;
        let z = tape.pair_add(pe, ps)?;
        let lp = self.combine(tape, z)?;
        tape.reshape(lp, &[t, u, self.vocab + 1])
    }

    /// Single-pair evaluation on raw vectors.
    pub fn forward(&self, store: &ParamStore, e: &[f64], s: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::no_grad(store);
        let ev = tape.constant(&[1, e.len()], e.to_vec())?;
        let sv = tape.constant(&[1, s.len()], s.to_vec())?;
        let pe = self.project_encoder(&mut tape, ev)?;
        let ps = self.project_pn(&mut tape, sv)?;
        let z = tape.add(pe, ps)?;
        let lp = self.combine(&mut tape, z)?;
        Ok(tape.value(lp).to_vec())
    }
}
