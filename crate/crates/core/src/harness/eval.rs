use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generation::{generate, DecodingTrace, GenerationLimits, GenerationOptions};
use crate::provider::{Context, LogitProvider};
use crate::strategies::DecodingParams;
use crate::weights::ModalityWeights;

use super::metrics::{Outcome, SuiteMetrics, TaskResult};
use super::Suite;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    /// Ask the provider with the modality query.
    #[default]
    Extracted,
    /// Use the one-hot weights of the task's true relevance.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Worker threads; 1 runs on the calling thread.
    pub workers: usize,
    pub limits: GenerationLimits,
    pub generation: GenerationOptions,
    pub weights: WeightSource,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            limits: GenerationLimits::new(4),
            generation: GenerationOptions::default(),
            weights: WeightSource::Extracted,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub metrics: SuiteMetrics,
    /// In task order.
    pub results: Vec<TaskResult>,
    /// In task order.
    pub traces: Vec<DecodingTrace>,
}

fn run_task(
    provider: &dyn LogitProvider,
    suite: &Suite,
    index: usize,
    params: &DecodingParams,
    options: &EvalOptions,
) -> Result<(TaskResult, DecodingTrace)> {
    let task = &suite.tasks[index];
    let mut gen_opts = options.generation;
    if options.weights == WeightSource::Oracle {
        gen_opts.oracle_weights = Some(ModalityWeights::one_hot(task.category.relevance()));
    }
    let ctx = Context::generation(task.id, task.question.tokens.clone());
    let g = generate(provider, params, &ctx, &options.limits, &gen_opts).map_err(|e| Error::Task {
        task: task.id,
        source: Box::new(e.error),
    })?;
    let first = g.tokens.first().copied();
    let weights = g.trace.weights;
    let result = TaskResult {
        task: task.id,
        category: task.category,
        first_token: first,
        outcome: Outcome::score(task, first),
        weights,
        weights_agree: weights.map(|w| w.argmax() == task.category.relevance()),
        tokens: g.tokens.len(),
        calls: g.trace.calls,
        ms: Some(g.trace.total_ms()),
    };
    Ok((result, g.trace))
}

/// Decodes every task of `suite` with `provider` and scores the first
/// emitted token. Results do not depend on the worker count.
pub fn evaluate(
    provider: &dyn LogitProvider,
    suite: &Suite,
    params: &DecodingParams,
    options: &EvalOptions,
) -> Result<Evaluation> {
    if suite.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty suite"));
    }
    params.validate()?;
    let workers = options.workers.max(1);
    let outputs: Vec<Result<(TaskResult, DecodingTrace)>> = if workers == 1 {
        (0..suite.len()).map(|i| run_task(provider, suite, i, params, options)).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Configuration(format!("thread pool: {e}")))?;
        pool.install(|| {
            (0..suite.len())
                .into_par_iter()
                .map(|i| run_task(provider, suite, i, params, options))
                .collect()
        })
    };
    let mut results = Vec::with_capacity(outputs.len());
    let mut traces = Vec::with_capacity(outputs.len());
    for out in outputs {
        let (r, t) = out?;
        results.push(r);
        traces.push(t);
    }
    Ok(Evaluation {
        metrics: SuiteMetrics::aggregate(&results),
        results,
        traces,
    })
}
