//! The full model: backbone, decoder and contrastive heads over one shared
//! parameter store.

use ndarray::{Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::Backbone;
use crate::cdp::CdpHeads;
use crate::config::Config;
use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::igc::IgcDecoder;
use crate::nn::Pass;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::types::{ImageTensor, InferenceMap};

pub struct SeamlessModel {
    pub backbone: Backbone,
    pub decoder: IgcDecoder,
    pub cdp: CdpHeads,
}

/// Graph handles from one training forward.
pub struct TrainForward {
    pub levels: [Var; 5],
    pub t_half: Var,
    pub t_act: Var,
    /// (foreground, background, contrastive penalty) when CDP ran.
    pub contrastive: Option<(Var, Var, Var)>,
}

impl SeamlessModel {
    /// Builds the model, registering parameters; initialization is
    /// deterministic in `train.seed`. Optional backbone weights are loaded
    /// on top of the random initialization.
    pub fn build<T: Scalar>(cfg: &Config, ps: &mut ParamStore<T>) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
        let profile = cfg.backbone.profile;
        let backbone = Backbone::new(ps, &mut rng, profile, cfg.backbone.resolved_input_norm());
        let decoder = IgcDecoder::new(ps, &mut rng, profile, &cfg.decoder);
        let cdp = CdpHeads::new(ps, &mut rng, profile, &cfg.cdp, cfg.train.image_size)?;
        if cfg.backbone.freeze {
            // Backbone tensors were registered first; rebuild the store with
            // them frozen. Freezing must precede any graph use, so doing it
            // here keeps the constructor the only place store layout changes.
            crate::engine::checkpoint::freeze_prefix(ps, "backbone.");
        }
        if let Some(path) = &cfg.backbone.weights_path {
            let loaded =
                crate::engine::checkpoint::load_tensors_into(ps, path, Some("backbone."))?;
            log::info!("loaded {loaded} backbone tensors from {}", path.display());
        }
        Ok(Self { backbone, decoder, cdp })
    }

    /// Training-mode forward over a normalized batch. `bg_masks` are the
    /// supervision masks at input resolution (ground truth or pseudo),
    /// consumed by the background head as `1 - mask` weights.
    pub fn forward_train<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        ps: &mut ParamStore<T>,
        images: Array4<T>,
        bg_masks: &[Array2<T>],
        cdp_enabled: bool,
    ) -> TrainForward {
        let (_, _, h, w) = images.dim();
        let images = self.backbone.normalize_batch(images);
        let imgs = g.constant(images.into_dyn());
        let mut pass = Pass::Train(ps);
        let levels = self.backbone.extract(g, &mut pass, imgs);
        let dec = self.decoder.forward(g, &mut pass, &levels, h, w);
        let store = pass.store();
        let contrastive = cdp_enabled.then(|| {
            let vf = self.cdp.foreground(g, store, dec.t_half);
            let vb = self.cdp.background(g, store, levels[self.cdp.bg_level], bg_masks);
            let neg = self.cdp.contrastive(g, vf, vb);
            (vf, vb, neg)
        });
        TrainForward {
            levels,
            t_half: dec.t_half,
            t_act: dec.t_act,
            contrastive,
        }
    }

    /// Inference on one image: backbone and decoder only, no contrastive
    /// heads. Pure in (parameters, input).
    pub fn infer_one<T: Scalar>(
        &self,
        ps: &ParamStore<T>,
        image: &ImageTensor<T>,
    ) -> Result<InferenceMap<T>> {
        let (h, w) = (image.height(), image.width());
        Backbone::check_input(h, w)?;
        let batch = image.data().clone().insert_axis(Axis(0));
        let batch = self.backbone.normalize_batch(batch);
        let mut g = Graph::inference();
        let imgs = g.constant(batch.into_dyn());
        let mut pass = Pass::Eval(ps);
        let levels = self.backbone.extract(&mut g, &mut pass, imgs);
        let dec = self.decoder.forward(&mut g, &mut pass, &levels, h, w);
        let plane = |v: Var| -> Array2<T> {
            g.value(v)
                .view()
                .into_dimensionality::<ndarray::Ix4>()
                .unwrap()
                .index_axis(Axis(0), 0)
                .index_axis(Axis(0), 0)
                .to_owned()
        };
        Ok(InferenceMap {
            t_half: plane(dec.t_half),
            t_act: plane(dec.t_act),
        })
    }
}
