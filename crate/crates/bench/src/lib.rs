//! Shared fixtures for the benchmarks.

use popparts_core::encoder::{encode, EncodedMaps};
use popparts_core::loss::StagePredictions;
use popparts_core::pipeline::{synth_scene, PipelineConfig};
use popparts_core::synth::{oracle_predict, RenderedScene};
use popparts_core::Skeleton;

/// A rendered scene, its ground-truth maps and a noisy oracle prediction.
pub struct Fixture {
    pub cfg: PipelineConfig,
    pub scene: RenderedScene,
    pub maps: EncodedMaps,
    pub pred: StagePredictions,
}

/// Scene `index` of the default round trip with mild oracle noise.
pub fn fixture(index: usize) -> Fixture {
    let mut cfg = PipelineConfig::default();
    cfg.noise.heat_sigma = 0.02;
    cfg.noise.pose_sigma = 0.1;
    let scene = synth_scene(&cfg, 0, index).expect("scene renders");
    let maps = encode(&scene.poses, Skeleton::itop15().k, &scene.depth, &cfg.encoder).expect("scene encodes");
    let pred = oracle_predict(&maps, &cfg.noise).expect("oracle runs");
    Fixture { cfg, scene, maps, pred }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixture_has_people() {
        let f = fixture(0);
        assert!(!f.scene.poses.is_empty());
        assert_eq!(f.pred.stages.len(), f.cfg.noise.stages);
    }
}
