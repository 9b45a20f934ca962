//! Multi-view patch contrastive learning.
//!
//! Patches are cropped from the restored background (queries), the restored
//! noise layer (negatives) and, depending on the view, a positive source:
//! the restored background itself (V1), its ground truth (V2) or the ground
//! truth of another image (V3). Patches are embedded by the shared encoder
//! followed by a two-layer MLP and scored with an InfoNCE objective.

use crate::backbone::U2Former;
use crate::error::{Error, Result};
use crate::numerics::{concat, stack_rows, Bound, Element, Init, ParamBuilder, ParamId, Tensor, Var};
use crate::rng::Stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    V1,
    V2,
    V3,
}

impl View {
    pub const ALL: [View; 3] = [View::V1, View::V2, View::V3];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    RestoredBackground,
    RestoredNoise,
    GtSame,
    GtOther,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveConfig {
    pub patch_size: usize,
    pub n_per_role: usize,
    pub hidden: usize,
    pub dim: usize,
    pub l2_normalize: bool,
    pub temperature: f64,
    /// Treat positive and negative embeddings as constants.
    pub stop_gradient: bool,
    pub views: Vec<View>,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            patch_size: 16,
            n_per_role: 4,
            hidden: 128,
            dim: 64,
            l2_normalize: true,
            temperature: 1.0,
            stop_gradient: false,
            views: View::ALL.to_vec(),
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.n_per_role == 0 || self.hidden == 0 || self.dim == 0 {
            return Err(Error::config("contrastive sizes must be positive"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("contrastive temperature must be positive"));
        }
        Ok(())
    }
}

pub struct PatchSet<'t, T: Element> {
    pub patches: Vec<Var<'t, T>>,
    /// Top-left corners `(y, x)`.
    pub corners: Vec<(usize, usize)>,
    pub source: Source,
    pub image_id: usize,
}

fn draw_corners(h: usize, w: usize, n: usize, p: usize, avoid: &[(usize, usize)], rng: &mut Stream) -> Result<Vec<(usize, usize)>> {
    if p == 0 || p > h || p > w {
        return Err(Error::PatchTooLarge { patch: p, height: h, width: w });
    }
    let (ny, nx) = (h - p + 1, w - p + 1);
    let free = ny * nx - avoid.iter().filter(|&&(y, x)| y < ny && x < nx).count();
    if free == 0 {
        return Err(Error::DegeneratePatchGrid(format!("every {p}x{p} corner of a {h}x{w} image is excluded")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let c = (rng.below(ny), rng.below(nx));
        if !avoid.contains(&c) {
            out.push(c);
        }
    }
    Ok(out)
}

fn crop_at<'t, T: Element>(image: &Var<'t, T>, corners: Vec<(usize, usize)>, p: usize, source: Source, image_id: usize) -> Result<PatchSet<'t, T>> {
    let patches = corners.iter().map(|&(y, x)| image.crop(y, x, p, p)).collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        patches,
        corners,
        source,
        image_id,
    })
}

/// `n` `p x p` crops at corners drawn uniformly over all valid positions.
pub fn crop_patches<'t, T: Element>(image: &Var<'t, T>, n: usize, p: usize, source: Source, image_id: usize, rng: &mut Stream) -> Result<PatchSet<'t, T>> {
    if n == 0 {
        return Err(Error::config("crop_patches needs n >= 1"));
    }
    let (_, h, w) = image.value().dims3()?;
    let corners = draw_corners(h, w, n, p, &[], rng)?;
    crop_at(image, corners, p, source, image_id)
}

/// Two-layer MLP with a ReLU between.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

impl ProjectionHead {
    pub fn new<T: Element>(pb: &mut ParamBuilder<'_, T>, input: usize, hidden: usize, output: usize) -> Result<Self> {
        Ok(ProjectionHead {
            input,
            hidden,
            output,
            fc1_w: pb.param("fc1.weight", &[input, hidden], Init::FanUniform(input))?,
            fc1_b: pb.param("fc1.bias", &[hidden], Init::FanUniform(input))?,
            fc2_w: pb.param("fc2.weight", &[hidden, output], Init::FanUniform(hidden))?,
            fc2_b: pb.param("fc2.bias", &[output], Init::FanUniform(hidden))?,
        })
    }

    pub fn num_params(&self) -> usize {
        (self.input + 1) * self.hidden + (self.hidden + 1) * self.output
    }

    /// `[N, input] -> [N, output]`.
    pub fn forward<'t, T: Element>(&self, x: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        x.linear(&p.get(self.fc1_w), Some(&p.get(self.fc1_b)))?
            .relu()
            .linear(&p.get(self.fc2_w), Some(&p.get(self.fc2_b)))
    }
}

/// Unit-norm copy of a rank-1 embedding.
pub fn l2_normalize<'t, T: Element>(e: &Var<'t, T>) -> Result<Var<'t, T>> {
    let norm = e.square().sum().add_scalar(1e-24).sqrt();
    let inv = e.tape().constant(Tensor::scalar(T::one())).div(&norm)?;
    e.mul_scalar_var(&inv)
}

/// Encoder plus projection head.
#[derive(Clone, Copy)]
pub struct Embedder<'a> {
    pub model: &'a U2Former,
    pub head: &'a ProjectionHead,
    pub l2_normalize: bool,
}

impl Embedder<'_> {
    /// `MLP(GAP(X_4))` for each patch.
    pub fn embed_all<'t, T: Element>(&self, patches: &[Var<'t, T>], p: &Bound<'t, T>) -> Result<Vec<Var<'t, T>>> {
        let pooled = patches
            .iter()
            .map(|patch| {
                let feats = self.model.encode_padded(patch, p)?;
                feats.last().expect("encoder output").global_avg_pool()
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.head.forward(&stack_rows(&pooled)?, p)?;
        (0..patches.len())
            .map(|i| {
                let e = out.index_select(0, &[i])?.reshape(&[self.head.output])?;
                if self.l2_normalize {
                    l2_normalize(&e)
                } else {
                    Ok(e)
                }
            })
            .collect()
    }

    pub fn embed<'t, T: Element>(&self, patch: &Var<'t, T>, p: &Bound<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.embed_all(std::slice::from_ref(patch), p)?.remove(0))
    }
}

/// Patches for one view, before embedding.
pub struct PatchPairs<'t, T: Element> {
    pub view: View,
    pub queries: PatchSet<'t, T>,
    pub positives: PatchSet<'t, T>,
    pub negatives: PatchSet<'t, T>,
}

pub struct ContrastiveBatch<'t, T: Element> {
    pub view: View,
    pub queries: Vec<Var<'t, T>>,
    pub positives: Vec<Var<'t, T>>,
    pub negatives: Vec<Var<'t, T>>,
}

/// The images one sample contributes to contrastive pairs.
#[derive(Clone, Copy)]
pub struct PairSources<'s, 't, T: Element> {
    pub restored_t: &'s Var<'t, T>,
    pub restored_r: &'s Var<'t, T>,
    pub gt_same: &'s Var<'t, T>,
    pub gt_others: &'s [Var<'t, T>],
    pub image_id: usize,
}

fn positives_for<'t, T: Element>(
    src: &PairSources<'_, 't, T>,
    view: View,
    queries: &PatchSet<'t, T>,
    n: usize,
    p: usize,
    rng: &mut Stream,
) -> Result<PatchSet<'t, T>> {
    match view {
        View::V1 => {
            let (_, h, w) = src.restored_t.value().dims3()?;
            let corners = draw_corners(h, w, n, p, &queries.corners, rng)?;
            crop_at(src.restored_t, corners, p, Source::RestoredBackground, src.image_id)
        }
        View::V2 => crop_patches(src.gt_same, n, p, Source::GtSame, src.image_id, rng),
        View::V3 => {
            if src.gt_others.is_empty() {
                return Err(Error::MissingOtherGroundtruth);
            }
            let k = rng.below(src.gt_others.len());
            let mut set = crop_patches(&src.gt_others[k], n, p, Source::GtOther, k, rng)?;
            set.image_id = k;
            Ok(set)
        }
    }
}

/// Query, positive and negative crops for `view`; queries and V1 positives
/// never share a corner.
pub fn build_pairs<'t, T: Element>(src: &PairSources<'_, 't, T>, view: View, n: usize, p: usize, rng: &mut Stream) -> Result<PatchPairs<'t, T>> {
    if view == View::V3 && src.gt_others.is_empty() {
        return Err(Error::MissingOtherGroundtruth);
    }
    let queries = crop_patches(src.restored_t, n, p, Source::RestoredBackground, src.image_id, rng)?;
    let negatives = crop_patches(src.restored_r, n, p, Source::RestoredNoise, src.image_id, rng)?;
    let positives = positives_for(src, view, &queries, n, p, rng)?;
    Ok(PatchPairs {
        view,
        queries,
        positives,
        negatives,
    })
}

fn detach<'t, T: Element>(v: &[Var<'t, T>]) -> Vec<Var<'t, T>> {
    v.iter().map(|e| e.tape().constant(e.to_tensor())).collect()
}

impl<'t, T: Element> PatchPairs<'t, T> {
    pub fn embed(&self, embedder: &Embedder<'_>, stop_gradient: bool, p: &Bound<'t, T>) -> Result<ContrastiveBatch<'t, T>> {
        let queries = embedder.embed_all(&self.queries.patches, p)?;
        let mut positives = embedder.embed_all(&self.positives.patches, p)?;
        let mut negatives = embedder.embed_all(&self.negatives.patches, p)?;
        if stop_gradient {
            positives = detach(&positives);
            negatives = detach(&negatives);
        }
        Ok(ContrastiveBatch {
            view: self.view,
            queries,
            positives,
            negatives,
        })
    }
}

/// `-sum_i log(sum_j exp(q_i.p_j/tau) / (sum_j exp(q_i.p_j/tau) + sum_k exp(q_i.n_k/tau)))`.
pub fn nce_loss<'t, T: Element>(batch: &ContrastiveBatch<'t, T>, temperature: f64) -> Result<Var<'t, T>> {
    if batch.positives.is_empty() {
        return Err(Error::EmptyPositives);
    }
    if batch.queries.is_empty() {
        return Err(Error::shape("contrastive batch has no queries"));
    }
    let tape = batch.queries[0].tape();
    if batch.negatives.is_empty() {
        return Ok(tape.constant(Tensor::scalar(T::zero())));
    }
    let q = stack_rows(&batch.queries)?;
    // Similarities are laid out [N_j (+ N_k), N_i] so candidates stack along axis 0.
    let pos = stack_rows(&batch.positives)?.matmul_t(&q, false, true)?.scale(1.0 / temperature);
    let neg = stack_rows(&batch.negatives)?.matmul_t(&q, false, true)?.scale(1.0 / temperature);
    let all = concat(&[pos, neg])?;
    let lse_pos = pos.permute(&[1, 0])?.logsumexp();
    let lse_all = all.permute(&[1, 0])?.logsumexp();
    Ok(lse_all.sub(&lse_pos)?.sum())
}

pub struct MultiviewLoss<'t, T: Element> {
    pub loss: Var<'t, T>,
    pub per_view: Vec<(View, f64)>,
    /// Every configured view was skipped; `loss` is zero.
    pub degenerate: bool,
}

/// Mean NCE loss over the configured views for one sample. Queries and
/// negatives are drawn once and shared by all views; views whose
/// preconditions fail (V3 without other ground truths) are skipped.
pub fn multiview_loss<'t, T: Element>(
    src: &PairSources<'_, 't, T>,
    embedder: &Embedder<'_>,
    cfg: &ContrastiveConfig,
    p: &Bound<'t, T>,
    rng: &mut Stream,
) -> Result<MultiviewLoss<'t, T>> {
    let views: Vec<View> = cfg
        .views
        .iter()
        .copied()
        .filter(|&v| v != View::V3 || !src.gt_others.is_empty())
        .collect();
    let tape = src.restored_t.tape();
    if views.is_empty() {
        log::warn!("all contrastive views skipped");
        return Ok(MultiviewLoss {
            loss: tape.constant(Tensor::scalar(T::zero())),
            per_view: Vec::new(),
            degenerate: true,
        });
    }
    let (n, ps) = (cfg.n_per_role, cfg.patch_size);
    let queries = crop_patches(src.restored_t, n, ps, Source::RestoredBackground, src.image_id, rng)?;
    let negatives = crop_patches(src.restored_r, n, ps, Source::RestoredNoise, src.image_id, rng)?;
    let q = embedder.embed_all(&queries.patches, p)?;
    let mut neg = embedder.embed_all(&negatives.patches, p)?;
    if cfg.stop_gradient {
        neg = detach(&neg);
    }
    let mut terms = Vec::with_capacity(views.len());
    let mut per_view = Vec::with_capacity(views.len());
    for view in views {
        let positives = positives_for(src, view, &queries, n, ps, rng)?;
        let mut pos = embedder.embed_all(&positives.patches, p)?;
        if cfg.stop_gradient {
            pos = detach(&pos);
        }
        let batch = ContrastiveBatch {
            view,
            queries: q.clone(),
            positives: pos,
            negatives: neg.clone(),
        };
        let l = nce_loss(&batch, cfg.temperature)?;
        per_view.push((view, l.item().to_f64()));
        terms.push(l);
    }
    let k = terms.len() as f64;
    let loss = terms.iter().skip(1).try_fold(terms[0], |acc, t| acc.add(t))?.scale(1.0 / k);
    Ok(MultiviewLoss {
        loss,
        per_view,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::U2FormerConfig;
    use crate::numerics::{grad_check_inputs, InitMode, ParamStore, Tape};

    fn batch<'t>(tape: &'t Tape<f64>, q: &[&[f64]], pos: &[&[f64]], neg: &[&[f64]]) -> ContrastiveBatch<'t, f64> {
        let vars = |rows: &[&[f64]]| -> Vec<Var<'t, f64>> {
            rows.iter().map(|r| tape.constant(Tensor::from_f64(&[r.len()], r).unwrap())).collect()
        };
        ContrastiveBatch {
            view: View::V1,
            queries: vars(q),
            positives: vars(pos),
            negatives: vars(neg),
        }
    }

    /// Direct evaluation of the objective without any shift.
    fn naive(q: &[&[f64]], pos: &[&[f64]], neg: &[&[f64]]) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        q.iter()
            .map(|qi| {
                let sp: f64 = pos.iter().map(|p| dot(qi, p).exp()).sum();
                let sn: f64 = neg.iter().map(|n| dot(qi, n).exp()).sum();
                -(sp / (sp + sn)).ln()
            })
            .sum()
    }

    #[test]
    fn equal_similarities_give_ln2() {
        let tape = Tape::inference();
        let e: &[f64] = &[0.6, 0.8];
        let l = nce_loss(&batch(&tape, &[e], &[e], &[e]), 1.0).unwrap().item();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn unit_positive_zero_negative() {
        let tape = Tape::inference();
        let l = nce_loss(&batch(&tape, &[&[1.0, 0.0]], &[&[1.0, 0.0]], &[&[0.0, 1.0]]), 1.0).unwrap().item();
        let e = std::f64::consts::E;
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.313262).abs() < 1e-6);
    }

    #[test]
    fn no_negatives_is_exactly_zero() {
        let tape = Tape::inference();
        let l = nce_loss(&batch(&tape, &[&[0.3, 2.0], &[-1.0, 0.5]], &[&[1.0, 4.0]], &[]), 1.0).unwrap();
        assert_eq!(l.item(), 0.0);
    }

    #[test]
    fn empty_positives_is_an_error() {
        let tape = Tape::inference();
        let err = nce_loss(&batch(&tape, &[&[1.0]], &[], &[&[1.0]]), 1.0).unwrap_err();
        assert!(matches!(err, Error::EmptyPositives));
    }

    #[test]
    fn matches_naive_form_and_is_stable() {
        let q: &[&[f64]] = &[&[0.2, -0.4, 1.1], &[0.9, 0.1, -0.3]];
        let pos: &[&[f64]] = &[&[0.5, 0.5, 0.1], &[-0.2, 0.3, 0.8], &[1.0, 0.0, 0.0]];
        let neg: &[&[f64]] = &[&[0.0, -1.0, 0.4], &[0.3, 0.3, 0.3]];
        let tape = Tape::inference();
        let l = nce_loss(&batch(&tape, q, pos, neg), 1.0).unwrap().item();
        assert!((l - naive(q, pos, neg)).abs() < 1e-12);

        let big = nce_loss(&batch(&tape, &[&[80.0]], &[&[1.0]], &[&[-1.0], &[0.99]]), 1.0).unwrap().item();
        assert!(big.is_finite() && big >= 0.0);
        let tiny = nce_loss(&batch(&tape, &[&[-80.0]], &[&[1.0]], &[&[-1.0]]), 1.0).unwrap().item();
        assert!((tiny - 160.0).abs() < 1e-9, "{tiny}");
    }

    #[test]
    fn monotone_in_similarities() {
        let tape = Tape::inference();
        let q: &[f64] = &[1.0, 0.0];
        let mut last = f64::INFINITY;
        for s in [-2.0, -0.5, 0.0, 0.7, 3.0] {
            let l = nce_loss(&batch(&tape, &[q], &[&[s, 0.4]], &[&[0.1, 1.0]]), 1.0).unwrap().item();
            assert!(l <= last);
            last = l;
        }
        let mut last = 0.0;
        for s in [-2.0, -0.5, 0.0, 0.7, 3.0] {
            let l = nce_loss(&batch(&tape, &[q], &[&[0.2, 0.4]], &[&[s, 1.0]]), 1.0).unwrap().item();
            assert!(l >= last);
            last = l;
        }
    }

    #[test]
    fn temperature_divides_similarities() {
        let tape = Tape::inference();
        let a = nce_loss(&batch(&tape, &[&[1.0, 0.5]], &[&[0.4, 0.2]], &[&[0.1, 0.9]]), 0.5).unwrap().item();
        let b = nce_loss(&batch(&tape, &[&[2.0, 1.0]], &[&[0.4, 0.2]], &[&[0.1, 0.9]]), 1.0).unwrap().item();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut s = Stream::new(3, 3);
        let mk = |s: &mut Stream| Tensor::<f64>::from_fn(&[4], |_| s.normal());
        let inputs: Vec<Tensor<f64>> = (0..7).map(|_| mk(&mut s)).collect();
        let report = grad_check_inputs(
            &inputs,
            |_, v| {
                let b = ContrastiveBatch {
                    view: View::V2,
                    queries: v[0..2].to_vec(),
                    positives: v[2..4].to_vec(),
                    negatives: v[4..7].to_vec(),
                };
                nce_loss(&b, 0.7)
            },
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn crop_bounds_and_determinism() {
        let tape = Tape::<f64>::inference();
        let img = tape.constant(Tensor::from_fn(&[3, 64, 64], |i| (i % 97) as f64 / 97.0));
        let a = crop_patches(&img, 4, 16, Source::GtSame, 0, &mut Stream::new(5, 1)).unwrap();
        let b = crop_patches(&img, 4, 16, Source::GtSame, 0, &mut Stream::new(5, 1)).unwrap();
        assert_eq!(a.corners, b.corners);
        assert_eq!(a.patches.len(), 4);
        for (&(y, x), patch) in a.corners.iter().zip(&a.patches) {
            assert!(y <= 48 && x <= 48);
            assert_eq!(patch.shape(), vec![3, 16, 16]);
            assert_eq!(patch.value().at(&[1, 2, 3]), img.value().at(&[1, y + 2, x + 3]));
        }
        let whole = crop_patches(&img, 3, 64, Source::GtSame, 0, &mut Stream::new(1, 1)).unwrap();
        assert!(whole.corners.iter().all(|&c| c == (0, 0)));
        assert!(matches!(
            crop_patches(&img, 1, 65, Source::GtSame, 0, &mut Stream::new(1, 1)),
            Err(Error::PatchTooLarge { .. })
        ));
    }

    #[test]
    fn pair_construction_rules() {
        let tape = Tape::<f64>::inference();
        let mk = |v: f64| tape.constant(Tensor::full(&[3, 24, 24], v));
        let (t, r, g, o) = (mk(0.1), mk(0.2), mk(0.3), mk(0.4));
        let others = [o];
        let src = PairSources {
            restored_t: &t,
            restored_r: &r,
            gt_same: &g,
            gt_others: &others,
            image_id: 0,
        };
        let mut rng = Stream::new(9, 0);
        let v1 = build_pairs(&src, View::V1, 2, 16, &mut rng).unwrap();
        assert_eq!(v1.positives.source, Source::RestoredBackground);
        assert!(v1.positives.corners.iter().all(|c| !v1.queries.corners.contains(c)));
        assert_eq!(v1.negatives.source, Source::RestoredNoise);
        let v2 = build_pairs(&src, View::V2, 2, 16, &mut rng).unwrap();
        assert_eq!(v2.positives.source, Source::GtSame);
        assert_eq!(v2.positives.patches[0].value().data()[0], 0.3);
        let v3 = build_pairs(&src, View::V3, 2, 16, &mut rng).unwrap();
        assert_eq!(v3.positives.source, Source::GtOther);
        assert_eq!(v3.positives.patches[1].value().data()[0], 0.4);
        for pairs in [&v1, &v2, &v3] {
            assert_eq!((pairs.queries.patches.len(), pairs.positives.patches.len(), pairs.negatives.patches.len()), (2, 2, 2));
        }
        let lonely = PairSources { gt_others: &[], ..src };
        assert!(matches!(build_pairs(&lonely, View::V3, 2, 16, &mut rng), Err(Error::MissingOtherGroundtruth)));
        let tight = tape.constant(Tensor::full(&[3, 16, 16], 0.5));
        let degenerate = PairSources { restored_t: &tight, ..src };
        assert!(matches!(build_pairs(&degenerate, View::V1, 1, 16, &mut rng), Err(Error::DegeneratePatchGrid(_))));
    }

    fn tiny_model() -> (ParamStore<f64>, U2Former, ProjectionHead) {
        let cfg = U2FormerConfig {
            base_channels: 4,
            stage_depths: [1, 1, 1, 1],
            bottleneck_blocks: 1,
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let mut rng = Stream::new(2, 0);
        let mut pb = ParamBuilder::new(&mut store, &mut rng, InitMode::Randomized(0.05));
        let model = U2Former::new(&mut pb, cfg).unwrap();
        let head = ProjectionHead::new(&mut pb.scope("head"), 64, 16, 8).unwrap();
        (store, model, head)
    }

    #[test]
    fn embeddings_are_unit_norm_and_deterministic() {
        let (store, model, head) = tiny_model();
        let emb = Embedder {
            model: &model,
            head: &head,
            l2_normalize: true,
        };
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let patch = tape.constant(Tensor::from_fn(&[3, 16, 16], |i| (i % 13) as f64 / 13.0));
        let e = emb.embed_all(&[patch, patch], &p).unwrap();
        assert_eq!(e[0].shape(), vec![8]);
        let norm: f64 = e[0].value().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
        assert_eq!(e[0].to_tensor(), e[1].to_tensor());
        assert_eq!(e[0].to_tensor(), emb.embed(&patch, &p).unwrap().to_tensor());
    }

    #[test]
    fn multiview_skips_view3_without_others() {
        let (store, model, head) = tiny_model();
        let emb = Embedder {
            model: &model,
            head: &head,
            l2_normalize: true,
        };
        let tape = Tape::inference();
        let p = store.bind(&tape);
        let mut s = Stream::new(4, 4);
        let mut img = || tape.constant(Tensor::from_fn(&[3, 32, 32], |_| s.uniform()));
        let (t, r, g) = (img(), img(), img());
        let src = PairSources {
            restored_t: &t,
            restored_r: &r,
            gt_same: &g,
            gt_others: &[],
            image_id: 0,
        };
        let cfg = ContrastiveConfig {
            n_per_role: 2,
            ..Default::default()
        };
        let out = multiview_loss(&src, &emb, &cfg, &p, &mut Stream::new(1, 1)).unwrap();
        let views: Vec<View> = out.per_view.iter().map(|v| v.0).collect();
        assert_eq!(views, vec![View::V1, View::V2]);
        let mean = (out.per_view[0].1 + out.per_view[1].1) / 2.0;
        assert!((out.loss.item() - mean).abs() < 1e-12);
        assert!(!out.degenerate);

        let none = ContrastiveConfig {
            views: vec![View::V3],
            ..cfg
        };
        let out = multiview_loss(&src, &emb, &none, &p, &mut Stream::new(1, 1)).unwrap();
        assert!(out.degenerate && out.loss.item() == 0.0);
    }

    #[test]
    fn constant_embeddings_give_n_ln2_per_view() {
        let tape = Tape::inference();
        let e: &[f64] = &[0.0, 1.0];
        for n in 1..4 {
            let rows = vec![e; n];
            let l = nce_loss(&batch(&tape, &rows, &rows, &rows), 1.0).unwrap().item();
            assert!((l - n as f64 * std::f64::consts::LN_2).abs() < 1e-12);
        }
    }
}
