use crate::autodiff::Tape;
use crate::encoder::EncoderStream;
use crate::error::Result;
use crate::loss::{AlignmentVariant, BLANK};
use crate::pn::PnState;
use crate::tensor::Tensor;

use super::TransducerModel;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DecodeResult {
    pub tokens: Vec<usize>,
    /// Encoder frame at which each token was emitted.
    pub frame_of_emission: Vec<usize>,
    /// `symbols_per_frame[n]` counts frames that emitted exactly `n` tokens.
    pub symbols_per_frame: Vec<usize>,
    pub frames: usize,
}

/// Index of the largest value; ties go to the lowest index.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Frame-synchronous greedy search shared by the offline and streaming paths.
struct Search<'m> {
    model: &'m TransducerModel,
    state: PnState,
    projected: Vec<f64>,
    result: DecodeResult,
}

impl<'m> Search<'m> {
    fn new(model: &'m TransducerModel) -> Result<Self> {
        let (state, s) = model.pn.start(&model.params)?;
        let projected = project_pn(model, &s)?;
        let cap = model.cfg.max_symbols_per_frame;
        Ok(Self {
            model,
            state,
            projected,
            result: DecodeResult {
                symbols_per_frame: vec![0; cap + 1],
                ..DecodeResult::default()
            },
        })
    }

    /// Consumes encoder frames `[n x D_e]`.
    fn frames(&mut self, enc: &[Vec<f64>]) -> Result<()> {
        if enc.is_empty() {
            return Ok(());
        }
        let m = self.model;
        let d = enc[0].len();
        let mut tape = Tape::no_grad(&m.params);
        let e = tape.constant(&[enc.len(), d], enc.concat())?;
        let pe = m.joiner.project_encoder(&mut tape, e)?;
        let dj = m.joiner.dim();
        let pe = tape.value(pe).to_vec();
        drop(tape);
        let cap = match m.cfg.variant {
            AlignmentVariant::Original => m.cfg.max_symbols_per_frame,
            AlignmentVariant::Monotonic => 1,
        };
        for row in pe.chunks(dj) {
            let t = self.result.frames;
            let mut emitted = 0;
            while emitted < cap {
                let k = argmax(&self.joint(row)?);
                if k == BLANK {
                    break;
                }
                self.result.tokens.push(k);
                self.result.frame_of_emission.push(t);
                let (state, s) = m.pn.step(&m.params, &self.state, k)?;
                self.state = state;
                self.projected = project_pn(m, &s)?;
                emitted += 1;
            }
            self.result.symbols_per_frame[emitted] += 1;
            self.result.frames += 1;
        }
        Ok(())
    }

    fn joint(&self, pe: &[f64]) -> Result<Vec<f64>> {
        let m = self.model;
        let mut tape = Tape::no_grad(&m.params);
        let dj = pe.len();
        let a = tape.constant(&[1, dj], pe.to_vec())?;
        let b = tape.constant(&[1, dj], self.projected.clone())?;
        let z = tape.add(a, b)?;
        let lp = m.joiner.combine(&mut tape, z)?;
        Ok(tape.value(lp).to_vec())
    }
}

fn project_pn(model: &TransducerModel, s: &[f64]) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad(&model.params);
    let sv = tape.constant(&[1, s.len()], s.to_vec())?;
    let p = model.joiner.project_pn(&mut tape, sv)?;
    Ok(tape.value(p).to_vec())
}

/// Greedy decoding of a whole utterance under the model's mask.
pub fn greedy_decode_offline(model: &TransducerModel, features: &Tensor) -> Result<DecodeResult> {
    let enc = model.encoder.encode(&model.params, features, &model.cfg.mask)?;
    let mut search = Search::new(model)?;
    search.frames(&enc)?;
    Ok(search.result)
}

/// Incremental decoder fed with feature chunks.
pub struct StreamingDecoder<'m> {
    stream: EncoderStream,
    search: Search<'m>,
}

impl<'m> StreamingDecoder<'m> {
    pub fn new(model: &'m TransducerModel) -> Result<Self> {
        Ok(Self {
            stream: model.encoder.start_stream(&model.cfg.mask)?,
            search: Search::new(model)?,
        })
    }

    /// Feeds row-major features; returns the number of tokens emitted so far.
    pub fn push(&mut self, chunk: &[f64]) -> Result<usize> {
        let m = self.search.model;
        let enc = m.encoder.push_chunk(&m.params, &mut self.stream, chunk)?;
        self.search.frames(&enc)?;
        Ok(self.search.result.tokens.len())
    }

    pub fn finish(mut self) -> Result<DecodeResult> {
        let m = self.search.model;
        let enc = m.encoder.finish_stream(&m.params, &mut self.stream)?;
        self.search.frames(&enc)?;
        Ok(self.search.result)
    }
}

/// Decodes row-major feature chunks in order, then flushes.
pub fn greedy_decode_streaming(model: &TransducerModel, chunks: &[&[f64]]) -> Result<DecodeResult> {
    let mut dec = StreamingDecoder::new(model)?;
    for c in chunks {
        dec.push(c)?;
    }
    dec.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_config;
    use crate::pn::PnKind;
    use crate::rng::{stream, Stream};

    #[test]
    fn ties_pick_lowest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[2.0, 2.0]), 0);
    }

    #[test]
    fn streaming_matches_offline_on_random_model() {
        let m = TransducerModel::new(&tiny_config(PnKind::NConcat), 4).unwrap();
        for seed in 0..5 {
            let f = Tensor::uniform(&[21, 3], 2.0, &mut stream(seed, Stream::Corpus)).unwrap();
            let off = greedy_decode_offline(&m, &f).unwrap();
            let chunks: Vec<&[f64]> = f.data().chunks(8 * 3).collect();
            let on = greedy_decode_streaming(&m, &chunks).unwrap();
            assert_eq!(off, on);
            assert_eq!(off.frames, 6);
            assert_eq!(off.symbols_per_frame.iter().sum::<usize>(), 6);
        }
    }
}
