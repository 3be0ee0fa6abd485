use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrammarConfig {
    pub n_tasks: usize,
    /// Global action vocabulary size.
    pub n_actions: usize,
    pub actions_per_task: usize,
    /// Probability of a precedence edge between two actions of a task.
    pub edge_density: f64,
    /// Exponent of the Zipf law over global action ranks; 0 is uniform.
    pub zipf_exponent: f64,
    /// Base-order-adjacent action pairs per task whose order is left free.
    pub swap_pairs: usize,
}

impl Default for GrammarConfig {
    fn default() -> Self {
        Self {
            n_tasks: 18,
            n_actions: 105,
            actions_per_task: 12,
            edge_density: 0.9,
            zipf_exponent: 1.0,
            swap_pairs: 2,
        }
    }
}

impl GrammarConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_tasks == 0 || self.n_actions == 0 || self.actions_per_task == 0 {
            return Err(Error::config("grammar counts must be positive"));
        }
        if self.actions_per_task > self.n_actions {
            return Err(Error::config(format!(
                "actions_per_task {} exceeds vocabulary {}",
                self.actions_per_task, self.n_actions
            )));
        }
        if !(0.0..=1.0).contains(&self.edge_density) {
            return Err(Error::config("edge_density must lie in [0, 1]"));
        }
        if self.zipf_exponent < 0.0 || !self.zipf_exponent.is_finite() {
            return Err(Error::config("zipf_exponent must be finite and >= 0"));
        }
        if self.swap_pairs * 2 > self.actions_per_task {
            return Err(Error::config("too many swap pairs for the task size"));
        }
        Ok(())
    }

    /// Unnormalised Zipf weight of global action `rank` (action index == rank).
    pub fn zipf_weight(&self, rank: usize) -> f64 {
        1.0 / ((rank + 1) as f64).powf(self.zipf_exponent)
    }
}

/// Precedence constraints over one task's actions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGrammar {
    pub task: usize,
    /// Global action indices, listed in the task's canonical order.
    pub actions: Vec<usize>,
    /// `(before, after)` pairs of global action indices.
    pub edges: Vec<(usize, usize)>,
    /// Unordered pairs whose relative order is free.
    pub swap_pairs: Vec<(usize, usize)>,
}

impl TaskGrammar {
    fn local(&self, action: usize) -> Option<usize> {
        self.actions.iter().position(|&a| a == action)
    }

    pub fn is_acyclic(&self) -> bool {
        self.topological_order_count_bounded(1) >= 1 || self.actions.is_empty()
    }

    /// True when `seq` holds distinct task actions and respects every edge
    /// between actions it contains.
    pub fn accepts(&self, seq: &[usize]) -> bool {
        let mut pos = vec![usize::MAX; self.actions.len()];
        for (i, &a) in seq.iter().enumerate() {
            match self.local(a) {
                Some(l) if pos[l] == usize::MAX => pos[l] = i,
                _ => return false,
            }
        }
        self.edges.iter().all(|&(u, v)| {
            let (pu, pv) = (pos[self.local(u).unwrap()], pos[self.local(v).unwrap()]);
            pu == usize::MAX || pv == usize::MAX || pu < pv
        })
    }

    fn adjacency(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        let n = self.actions.len();
        let mut succ = vec![Vec::new(); n];
        let mut indeg = vec![0; n];
        for &(u, v) in &self.edges {
            let (lu, lv) = (self.local(u).unwrap(), self.local(v).unwrap());
            succ[lu].push(lv);
            indeg[lv] += 1;
        }
        (succ, indeg)
    }

    /// Uniformly random choice among available actions at each step (Kahn).
    pub fn random_topological_order<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let (succ, mut indeg) = self.adjacency();
        let mut ready: Vec<usize> = (0..self.actions.len()).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(self.actions.len());
        while !ready.is_empty() {
            let pick = rng.gen_range(0..ready.len());
            let node = ready.swap_remove(pick);
            // keep candidate order stable for determinism across platforms
            ready.sort_unstable();
            order.push(self.actions[node]);
            for &s in &succ[node] {
                indeg[s] -= 1;
                if indeg[s] == 0 {
                    ready.push(s);
                    ready.sort_unstable();
                }
            }
        }
        order
    }

    /// Counts topological orders, stopping early at `limit`.
    pub fn topological_order_count_bounded(&self, limit: usize) -> usize {
        let (succ, indeg) = self.adjacency();
        fn rec(succ: &[Vec<usize>], indeg: &mut [usize], placed: &mut [bool], left: usize, limit: usize) -> usize {
            if left == 0 {
                return 1;
            }
            let mut total = 0;
            for i in 0..indeg.len() {
                if !placed[i] && indeg[i] == 0 {
                    placed[i] = true;
                    for &s in &succ[i] {
                        indeg[s] -= 1;
                    }
                    total += rec(succ, indeg, placed, left - 1, limit - total);
                    for &s in &succ[i] {
                        indeg[s] += 1;
                    }
                    placed[i] = false;
                    if total >= limit {
                        break;
                    }
                }
            }
            total
        }
        let n = self.actions.len();
        let mut indeg = indeg;
        rec(&succ, &mut indeg, &mut vec![false; n], n, limit)
    }
}

/// Samples `config.n_tasks` grammars. Task action subsets are drawn without
/// replacement with Zipf-distributed inclusion weights over global ranks.
pub fn generate_grammar(config: &GrammarConfig, seed: u64) -> Result<Vec<TaskGrammar>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(config.n_tasks);
    for task in 0..config.n_tasks {
        // Efraimidis-Spirakis: keep the k largest u^(1/w)
        let mut keyed: Vec<(f64, usize)> = (0..config.n_actions)
            .map(|a| {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                (u.ln() / config.zipf_weight(a), a)
            })
            .collect();
        keyed.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut actions: Vec<usize> = keyed[..config.actions_per_task].iter().map(|&(_, a)| a).collect();
        actions.shuffle(&mut rng);

        let n = actions.len();
        let mut free = BTreeSet::new();
        let mut swap_pairs = Vec::new();
        let mut starts: Vec<usize> = (0..n.saturating_sub(1)).collect();
        starts.shuffle(&mut rng);
        for s in starts {
            if swap_pairs.len() == config.swap_pairs {
                break;
            }
            if free.contains(&s) || free.contains(&(s + 1)) {
                continue;
            }
            free.insert(s);
            free.insert(s + 1);
            swap_pairs.push((actions[s], actions[s + 1]));
        }
        let mut edges = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                let swapped = j == i + 1 && swap_pairs.contains(&(actions[i], actions[j]));
                if !swapped && rng.gen_bool(config.edge_density) {
                    edges.push((actions[i], actions[j]));
                }
            }
        }
        out.push(TaskGrammar {
            task,
            actions,
            edges,
            swap_pairs,
        });
    }
    Ok(out)
}
