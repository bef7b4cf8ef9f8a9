// temporary: held-out margin stats for a list of checkpoints
use symnet::checkpoint::Checkpoint;
use symnet::data::{batch_by_length, generate, SyntheticTaskSpec, TaskKind};
use symnet::model::{ModelDims, NormStyle};
use symnet::symbiosis::{build_symbiosis, LayerMapStrategy, SymbiosisSpec};
use symnet::tensor::Precision;
use symnet::train::{eval_stats, TrainConfig, TrainedModel};

fn main() {
    let dims = ModelDims {
        d_model: 64, n_heads: 4, d_ffn: 256, vocab_size: 64, max_len: 64,
        dropout_p: 0.1, norm_style: NormStyle::Pre,
    };
    let spec = SymbiosisSpec { m: 4, o: 2, d: 2, strategy: LayerMapStrategy::Bottom };
    let data = generate(&SyntheticTaskSpec {
        task: TaskKind::Lexmap, vocab_size: 64, len_min: 4, len_max: 16,
        pairs: 10_000, seed: 11, lexmap_seed: 17,
    }).unwrap();
    let batches = batch_by_length(&data.valid, 256).unwrap();
    let refs: Vec<&symnet::data::Batch> = batches.iter().collect();
    let cfg = TrainConfig::default();
    for path in std::env::args().skip(1) {
        let ck = Checkpoint::read(std::path::Path::new(&path)).unwrap();
        let model = build_symbiosis(&dims, &spec, 0, Precision::Single).unwrap();
        ck.load_into(&mut model.store().borrow_mut()).unwrap();
        let stats = eval_stats(&TrainedModel::Symbiosis(Box::new(model)), &refs, &cfg, Precision::Single);
        println!(
            "{path}: nll_m {:.4} nll_s {:.4} margin {:.4} hinge_frac {:.4}",
            stats.nll_m, stats.nll_s.unwrap(), stats.margin_mean.unwrap(), stats.hinge_active_frac.unwrap()
        );
    }
}
