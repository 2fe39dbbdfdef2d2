use rand::Rng;
use triqa::data::QAItem;
use triqa::model::{forward_qa, init_model_params, ForwardOptions, ModelConfig};
use triqa::numerics::{gradient_check, seeded_rng, GradCheckOptions, Tensor};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        lambda1: 1.0,
        lambda2: 1.0,
        lambda3: 1.0,
        hops: 2,
        embed_dim: 6,
        hidden_dim: 4,
        video_in_dim: 5,
        audio_in_dim: 3,
        vocab_size: 12,
        n_answers: 5,
    }
}

fn tiny_item(seed: u64, cfg: &ModelConfig) -> QAItem {
    let mut rng = seeded_rng(seed, 40);
    let mut tokens = |n: usize| -> Vec<u32> { (0..n).map(|_| rng.random_range(2..12u32)).collect() };
    let question = tokens(4);
    let answers = [tokens(2), tokens(1), tokens(3), tokens(2), tokens(1)];
    let subtitle = tokens(6);
    let mut feats = |rows: usize, d: usize| -> Tensor<f32> {
        Tensor::new(
            vec![rows, d],
            (0..rows * d).map(|_| rng.random_range(-1.0f32..1.0)).collect(),
        )
        .unwrap()
    };
    QAItem {
        qid: format!("t{seed}"),
        question,
        answers,
        correct: 1,
        subtitle,
        video: Some(feats(3, cfg.video_in_dim)),
        audio: Some(feats(2, cfg.audio_in_dim)),
    }
}

#[test]
fn probe_f32_pipeline_gradcheck() {
    let cfg = tiny_cfg();
    for seed in [7u64, 8, 9] {
        let item = tiny_item(seed, &cfg);
        let ps32 = init_model_params(&cfg, 12 + seed).unwrap();
        let report = gradient_check(
            &ps32,
            |tape, ps| {
                let mut rng = seeded_rng(0, 0);
                let (logits, _) =
                    forward_qa(tape, ps, &cfg, &item, &ForwardOptions::default(), &mut rng)?;
                let (loss, _) = logits.softmax_crossentropy(item.correct)?;
                Ok(loss.scale(0.0078125))
            },
            &GradCheckOptions {
                eps: 1e-2,
                max_coords: 250,
                seed: 5,
                denom_floor: 1e-4,
            },
        )
        .unwrap();
        println!(
            "seed {seed}: max rel {:.3e} at {:?}[{}] (analytic {:.3e} numeric {:.3e})",
            report.max_rel_err,
            report.worst_param,
            report.worst_index,
            report.worst_analytic,
            report.worst_numeric
        );
    }
}
