//! The experiment registry: stable names, what each exercises, and which
//! config keys it reads.

use anyhow::Result;

use crate::config::ExperimentConfig;
use crate::experiments;
use crate::report::Outcome;

#[derive(Debug)]
pub struct Experiment {
    pub name: &'static str,
    pub anchor: &'static str,
    pub summary: &'static str,
    /// Draws random numbers, so a seed is mandatory.
    pub stochastic: bool,
    pub benchmarks: &'static [&'static str],
    /// Config keys the experiment reads.
    pub fields: &'static [&'static str],
    /// `levels` and `spacings` are paired entry by entry.
    pub paired_levels: bool,
    pub run: fn(&ExperimentConfig) -> Result<Outcome>,
}

pub static EXPERIMENTS: [Experiment; 9] = [
    Experiment {
        name: "static-value",
        anchor: "static value of a controlled BSDE problem, primal and dual",
        summary: "time-0 value by policy search on the tree and by the nodal set of the grid dual",
        stochastic: false,
        benchmarks: &["deterministic", "one_dim"],
        fields: &["benchmark", "horizon", "steps", "levels", "spacings", "tolerances", "tolerance", "policy_cap", "eps", "primal_only"],
        paired_levels: true,
        run: experiments::static_value,
    },
    Experiment {
        name: "duality",
        anchor: "nodal-set duality for reachable sets",
        summary: "HJB dual on a closed-form problem and nodal set vs reachable set under refinement",
        stochastic: false,
        benchmarks: &[],
        fields: &["steps", "spacings", "eps", "tolerance"],
        paired_levels: false,
        run: experiments::duality,
    },
    Experiment {
        name: "geometric-dpp",
        anchor: "geometric dynamic programming for nodal sets",
        summary: "epsilon-inclusion of nodal sets across two times, slack under refinement",
        stochastic: false,
        benchmarks: &[],
        fields: &["spacings", "policy_cap"],
        paired_levels: false,
        run: experiments::geometric_dpp,
    },
    Experiment {
        name: "dynamic-utility-linear",
        anchor: "linear dynamic utility built from switching Riccati regimes",
        summary: "switching invariants on Euler paths and the comparison property on trees",
        stochastic: true,
        benchmarks: &[],
        fields: &["seed", "horizon", "euler_steps", "paths", "steps", "pairs", "policy_cap"],
        paired_levels: false,
        run: experiments::dynamic_utility_linear,
    },
    Experiment {
        name: "tau-bound",
        anchor: "tail bound on the regime-switching times (moment-constant step)",
        summary: "empirical P(tau_n < T) against min(1, (2n)^m / 2^n)",
        stochastic: true,
        benchmarks: &[],
        fields: &["seed", "horizon", "euler_steps", "paths", "pilot_paths", "max_n"],
        paired_levels: false,
        run: experiments::tau_bound,
    },
    Experiment {
        name: "forward-dpp",
        anchor: "forward dynamic programming principle and Lipschitz continuity of the forward value",
        summary: "split residual of the forward value and its Lipschitz ratio on seeded pairs",
        stochastic: true,
        benchmarks: &[],
        fields: &["seed", "horizon", "steps", "mode", "pairs", "policy_cap"],
        paired_levels: false,
        run: experiments::forward_dpp,
    },
    Experiment {
        name: "master-residual",
        anchor: "master equation for the forward value",
        summary: "residual of the master equation on the control-free linear case under dt refinement",
        stochastic: false,
        benchmarks: &[],
        fields: &["horizon", "levels"],
        paired_levels: false,
        run: experiments::master_residual,
    },
    Experiment {
        name: "illposed-demo",
        anchor: "non-uniqueness for the right-derivative master equation",
        summary: "two generators agreeing at z = 0: identical right sides, forward values T apart",
        stochastic: false,
        benchmarks: &[],
        fields: &["horizon", "steps"],
        paired_levels: false,
        run: experiments::illposed_demo,
    },
    Experiment {
        name: "benchmark-verify",
        anchor: "closed-form time-inconsistency examples and their restoration",
        summary: "inconsistency witnesses, restored consistency and static-utility control groups",
        stochastic: false,
        benchmarks: &["deterministic", "one_dim", "mean_variance", "principal_agent"],
        fields: &["benchmark", "steps", "levels", "tolerance", "policy_cap"],
        paired_levels: false,
        run: experiments::benchmark_verify,
    },
];

pub fn find(name: &str) -> Option<&'static Experiment> {
    EXPERIMENTS.iter().find(|e| e.name == name)
}

/// One line per experiment, in registry order.
pub fn listing() -> Vec<String> {
    EXPERIMENTS.iter().map(|e| format!("{:<24} -> {} ({})", e.name, e.anchor, e.summary)).collect()
}
