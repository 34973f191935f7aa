use ndarray::Array2;
use rand::Rng;

use super::backend::{ProviderManifest, RawImageFeatures};
use crate::autograd::nn::Linear;
use crate::autograd::{Graph, ParamId, ParamStore, Var};

/// Number of grid feature elements (single-modal, multimodal, MLLM).
pub const GRID_ELEMENTS: usize = 3;
/// Number of region feature elements (detections, SGM description).
pub const REGION_ELEMENTS: usize = 2;

/// Paired feature sets in graph form: `grid` feeds the N = 3 MCFormer and
/// `region` the N = 2 one. Target rows always precede receptacle rows.
#[derive(Clone, Debug)]
pub struct FeatureBundle {
    pub region: Vec<Var>,
    pub grid: Vec<Var>,
}

/// Learned projections from raw encoder outputs to `d_model` tokens.
#[derive(Clone, Debug)]
pub struct FeatureProjector {
    pub detection: Linear,
    pub null_token: ParamId,
    pub sgm: Linear,
    pub grid: [Linear; GRID_ELEMENTS],
    pub d_model: usize,
}

pub(crate) fn row(v: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, v.len()), v.to_vec()).expect("row shape")
}

impl FeatureProjector {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        manifest: &ProviderManifest,
        d_model: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            detection: Linear::new(
                store,
                "features.detection",
                manifest.d_dv + manifest.d_dt,
                d_model,
                rng,
            ),
            null_token: store.add_normal("features.null_token", (1, d_model), 0.1, rng),
            sgm: Linear::new(store, "features.sgm", manifest.d_sg, d_model, rng),
            grid: [
                Linear::new(store, "features.grid_single", manifest.d_g1, d_model, rng),
                Linear::new(store, "features.grid_multi", manifest.d_g2, d_model, rng),
                Linear::new(store, "features.grid_mllm", manifest.d_g3, d_model, rng),
            ],
            d_model,
        }
    }

    /// One token per detection from `[visual ; label]`, or the null token when
    /// nothing was detected.
    pub fn detection_tokens(&self, g: &mut Graph, raw: &RawImageFeatures) -> Var {
        if raw.num_detections() == 0 {
            return g.param(self.null_token);
        }
        let joined = ndarray::concatenate(
            ndarray::Axis(1),
            &[raw.det_visual.view(), raw.det_label.view()],
        )
        .expect("detection rows agree");
        let x = g.input(joined);
        self.detection.forward(g, x)
    }

    pub fn sgm_token(&self, g: &mut Graph, raw: &RawImageFeatures) -> Var {
        let x = g.input(row(&raw.sgm_text));
        self.sgm.forward(g, x)
    }

    pub fn assemble_region(
        &self,
        g: &mut Graph,
        target: &RawImageFeatures,
        receptacle: &RawImageFeatures,
    ) -> Vec<Var> {
        let dt = self.detection_tokens(g, target);
        let dr = self.detection_tokens(g, receptacle);
        let st = self.sgm_token(g, target);
        let sr = self.sgm_token(g, receptacle);
        vec![g.concat_rows(&[dt, dr]), g.concat_rows(&[st, sr])]
    }

    pub fn assemble_grid(
        &self,
        g: &mut Graph,
        target: &RawImageFeatures,
        receptacle: &RawImageFeatures,
    ) -> Vec<Var> {
        let sources = |f: &RawImageFeatures| [f.grid_single.clone(), f.grid_multi.clone(), f.grid_mllm.clone()];
        let (ts, rs) = (sources(target), sources(receptacle));
        (0..GRID_ELEMENTS)
            .map(|i| {
                let xt = g.input(row(&ts[i]));
                let xr = g.input(row(&rs[i]));
                let ht = self.grid[i].forward(g, xt);
                let hr = self.grid[i].forward(g, xr);
                g.concat_rows(&[ht, hr])
            })
            .collect()
    }

    pub fn assemble(
        &self,
        g: &mut Graph,
        target: &RawImageFeatures,
        receptacle: &RawImageFeatures,
    ) -> FeatureBundle {
        FeatureBundle {
            region: self.assemble_region(g, target, receptacle),
            grid: self.assemble_grid(g, target, receptacle),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn manifest() -> ProviderManifest {
        ProviderManifest {
            d_dv: 3,
            d_dt: 2,
            d_sg: 4,
            d_g1: 2,
            d_g2: 3,
            d_g3: 2,
            backend_name: "test".into(),
            vocabulary: vec!["cup".into()],
            seed: 0,
        }
    }

    fn raw(id: &str, k: usize, offset: f64) -> RawImageFeatures {
        let m = manifest();
        let f = |n: usize, s: f64| (0..n).map(|i| ((i as f64) * 0.37 + s).sin()).collect::<Vec<_>>();
        RawImageFeatures {
            image_id: id.into(),
            det_visual: Array2::from_shape_fn((k, m.d_dv), |(i, j)| ((i * 7 + j) as f64 * 0.3 + offset).cos()),
            det_label: Array2::from_shape_fn((k, m.d_dt), |(i, j)| ((i * 5 + j) as f64 * 0.2 - offset).sin()),
            det_label_names: (0..k).map(|i| format!("obj{i}")).collect(),
            sgm_text: f(m.d_sg, offset),
            grid_single: f(m.d_g1, offset + 1.0),
            grid_multi: f(m.d_g2, offset + 2.0),
            grid_mllm: f(m.d_g3, offset + 3.0),
        }
    }

    fn setup() -> (ParamStore, FeatureProjector) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FeatureProjector::new(&mut store, &manifest(), 6, &mut rng);
        // Non-zero biases so the oracle exercises them.
        for (i, b) in [p.detection.bias, p.sgm.bias].into_iter().enumerate() {
            store.get_mut(b).mapv_inplace(|_| 0.1 * (i as f64 + 1.0));
        }
        (store, p)
    }

    /// Naive loop oracle for `x W + b`.
    fn naive_affine(x: &[f64], w: &Array2<f64>, b: &Array2<f64>) -> Vec<f64> {
        (0..w.ncols())
            .map(|j| {
                let mut acc = b[[0, j]];
                for i in 0..x.len() {
                    acc += x[i] * w[[i, j]];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn detection_tokens_match_loop_oracle() {
        let (store, p) = setup();
        let r = raw("a", 3, 0.5);
        let mut g = Graph::new(&store);
        let tokens = p.detection_tokens(&mut g, &r);
        let got = g.value(tokens);
        assert_eq!(got.dim(), (3, 6));
        for k in 0..3 {
            let mut x: Vec<f64> = r.det_visual.row(k).to_vec();
            x.extend(r.det_label.row(k).iter());
            let want = naive_affine(&x, store.get(p.detection.weight), store.get(p.detection.bias));
            for j in 0..6 {
                assert!((got[[k, j]] - want[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn no_detections_emit_null_token() {
        let (store, p) = setup();
        let r = raw("a", 0, 0.5);
        let mut g = Graph::new(&store);
        let t = p.detection_tokens(&mut g, &r);
        assert_eq!(g.value(t), store.get(p.null_token));
    }

    #[test]
    fn sgm_token_oracle_and_zero_case() {
        let (mut store, p) = setup();
        let r = raw("a", 1, 0.2);
        {
            let mut g = Graph::new(&store);
            let t = p.sgm_token(&mut g, &r);
            let want = naive_affine(&r.sgm_text, store.get(p.sgm.weight), store.get(p.sgm.bias));
            for j in 0..6 {
                assert!((g.value(t)[[0, j]] - want[j]).abs() < 1e-6);
            }
            let again = p.sgm_token(&mut g, &r);
            assert_eq!(g.value(t), g.value(again));
        }
        store.get_mut(p.sgm.bias).fill(0.0);
        let mut zero = r.clone();
        zero.sgm_text.iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&store);
        let t = p.sgm_token(&mut g, &zero);
        assert!(g.value(t).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn region_and_grid_shapes_and_concatenation() {
        let (store, p) = setup();
        let (t, r) = (raw("t", 2, 0.1), raw("r", 3, 0.9));
        let mut g = Graph::new(&store);
        let bundle = p.assemble(&mut g, &t, &r);
        assert_eq!(bundle.region.len(), REGION_ELEMENTS);
        assert_eq!(bundle.grid.len(), GRID_ELEMENTS);
        assert_eq!(g.shape(bundle.region[0]), (5, 6));
        assert_eq!(g.shape(bundle.region[1]), (2, 6));
        for &e in &bundle.grid {
            assert_eq!(g.shape(e), (2, 6));
        }
        // Manual concatenation oracle.
        let dt = p.detection_tokens(&mut g, &t);
        let dr = p.detection_tokens(&mut g, &r);
        let region0 = g.value(bundle.region[0]).clone();
        assert_eq!(region0.slice(ndarray::s![0..2, ..]), g.value(dt));
        assert_eq!(region0.slice(ndarray::s![2..5, ..]), g.value(dr));
        // Grid oracle per element.
        let srcs = [&t.grid_single, &t.grid_multi, &t.grid_mllm];
        for (i, src) in srcs.iter().enumerate() {
            let want = naive_affine(src, store.get(p.grid[i].weight), store.get(p.grid[i].bias));
            for j in 0..6 {
                assert!((g.value(bundle.grid[i])[[0, j]] - want[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn swapping_images_swaps_row_halves() {
        let (store, p) = setup();
        let (t, r) = (raw("t", 2, 0.1), raw("r", 2, 0.9));
        let mut g = Graph::new(&store);
        let ab = p.assemble(&mut g, &t, &r);
        let ba = p.assemble(&mut g, &r, &t);
        for (x, y) in ab.region.iter().chain(&ab.grid).zip(ba.region.iter().chain(&ba.grid)) {
            let (x, y) = (g.value(*x), g.value(*y));
            let h = x.nrows() / 2;
            assert_eq!(x.slice(ndarray::s![..h, ..]), y.slice(ndarray::s![h.., ..]));
            assert_eq!(x.slice(ndarray::s![h.., ..]), y.slice(ndarray::s![..h, ..]));
        }
        let same = p.assemble(&mut g, &t, &t);
        for e in same.grid.iter().chain(&same.region) {
            let v = g.value(*e);
            let h = v.nrows() / 2;
            assert_eq!(v.slice(ndarray::s![..h, ..]), v.slice(ndarray::s![h.., ..]));
        }
    }

    #[test]
    fn projection_is_linear_without_bias() {
        let (mut store, p) = setup();
        for l in p.grid.iter().chain([&p.sgm, &p.detection]) {
            store.get_mut(l.bias).fill(0.0);
        }
        let r = raw("a", 2, 0.3);
        let mut scaled = r.clone();
        let alpha = 2.5;
        scaled.sgm_text.iter_mut().for_each(|v| *v *= alpha);
        scaled.det_visual.mapv_inplace(|v| v * alpha);
        scaled.det_label.mapv_inplace(|v| v * alpha);
        let mut g = Graph::new(&store);
        let a = p.sgm_token(&mut g, &r);
        let b = p.sgm_token(&mut g, &scaled);
        let c = p.detection_tokens(&mut g, &r);
        let d = p.detection_tokens(&mut g, &scaled);
        for (x, y) in g.value(a).iter().zip(g.value(b)) {
            assert!((x * alpha - y).abs() < 1e-12);
        }
        for (x, y) in g.value(c).iter().zip(g.value(d)) {
            assert!((x * alpha - y).abs() < 1e-12);
        }
    }
}
