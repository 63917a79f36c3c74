//! Three ranks, a three-token budget, requests of 4, 1 and 1 tokens plus a
//! new 2-token arrival. Load-aware chunking fills every rank; FIFO chunking
//! spends the whole budget on the head of the queue.

use failsafe::scheduler::{format_scenario_steps, replay_scenario, Scenario, SchedulerMode};

fn main() -> failsafe::Result<()> {
    let scenario: Scenario = serde_json::from_str(include_str!("../data/scenarios/three_ranks.json"))?;
    for mode in [SchedulerMode::Adaptive, SchedulerMode::Fifo] {
        let steps = replay_scenario(&scenario, mode)?;
        println!("[{mode}] {} steps", steps.len());
        print!("{}", format_scenario_steps(&steps));
        let peak = steps.iter().map(|s| s.batch.max_load()).fold(0.0, f64::max);
        println!("heaviest rank load in any step: {peak:.3}\n");
    }
    Ok(())
}
