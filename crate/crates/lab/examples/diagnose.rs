//! Per-layer Hypothesis accuracy of a checkpoint under a few application
//! variants. Usage: diagnose CHECKPOINT [EPISODES]

use std::path::Path;

use tvlab::checkpoint::load_checkpoint;
use tvlab_core::hypothesis::{extract_all_layers, sample_dummy_query};
use tvlab_core::model::Interventions;
use tvlab_core::rng::rng_from;
use tvlab_core::tasks::{builtin_tasks, render_input, sample_episode, ARROW};
use tvlab_core::trainer::episode_seed;
use tvlab_core::{HookedModel, PatchSpec};

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let model = load_checkpoint(Path::new(&args[1])).expect("checkpoint");
    let n: usize = args.get(2).map_or(30, |s| s.parse().unwrap());
    let layers = model.config().n_layers;
    let tasks = builtin_tasks();
    // [layer][variant] correct counts; variants: plain, aligned, real-query, aligned real-query
    let mut hits = vec![[0usize; 4]; layers + 1];
    for task in &tasks {
        let mut task_hits = vec![[0usize; 4]; layers + 1];
        for i in 0..n {
            let ep = sample_episode(task, 5, episode_seed(7, "diag", &task.name, i)).unwrap();
            let mut r = rng_from(7, &[i as u64]);
            let dummy = sample_dummy_query(task, &ep, &mut r).unwrap();
            let prompt_len = ep.prompt().len();
            let fake = extract_all_layers(&model, &task.name, &ep.demos, &dummy, 0).unwrap();
            let real = extract_all_layers(&model, &task.name, &ep.demos, &ep.query, 0).unwrap();
            let mut input = render_input(&ep.query);
            input.push(ARROW);
            for l in 1..=layers {
                for (v, (tvs, offset)) in [(&fake, 0), (&fake, prompt_len - input.len()), (&real, 0), (&real, prompt_len - input.len())]
                    .into_iter()
                    .enumerate()
                {
                    let iv = Interventions {
                        patches: vec![PatchSpec {
                            layer: l,
                            position: input.len() - 1,
                            value: tvs[l].theta.clone(),
                        }],
                        position_offset: offset,
                        ..Interventions::default()
                    };
                    if model.run(&input, &iv).unwrap().prediction() == ep.answer {
                        task_hits[l][v] += 1;
                        hits[l][v] += 1;
                    }
                }
            }
        }
        let best: Vec<String> = (1..=layers)
            .map(|l| format!("{}:{}/{}", l, task_hits[l][0], task_hits[l][1]))
            .collect();
        println!("{:12} plain/aligned {}", task.name, best.join(" "));
    }
    let total = (n * tasks.len()) as f64;
    for l in 1..=layers {
        println!(
            "L={l} plain {:.3} aligned {:.3} real {:.3} real-aligned {:.3}",
            hits[l][0] as f64 / total,
            hits[l][1] as f64 / total,
            hits[l][2] as f64 / total,
            hits[l][3] as f64 / total
        );
    }
}
