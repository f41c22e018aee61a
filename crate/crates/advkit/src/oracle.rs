//! Budget-enforced, label-only access to a frozen target model.
//!
//! The oracle is the only place the substitute pipeline can obtain labels.
//! It returns hard labels (never scores or gradients), debits a global
//! query budget, and rejects any second query for the same sample identity,
//! since repeating queries for one input is exactly the access pattern a
//! deployed service can flag.

use std::collections::HashSet;
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// A sample labeled by the oracle.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: u64,
    pub x: Tensor,
    pub y: usize,
}

/// One audit line: which sample was queried, in what order, and what came back.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LedgerEntry {
    pub id: u64,
    pub counter: usize,
    pub label: usize,
}

#[derive(Debug, Default)]
struct Ledger {
    used: usize,
    ids: HashSet<u64>,
    entries: Vec<LedgerEntry>,
}

#[derive(Debug)]
pub struct Oracle {
    target: Model,
    budget_total: usize,
    ledger: Mutex<Ledger>,
}

impl Oracle {
    pub fn new(target: Model, budget_total: usize) -> Self {
        Self { target, budget_total, ledger: Mutex::new(Ledger::default()) }
    }

    pub fn num_classes(&self) -> usize {
        self.target.num_classes()
    }

    pub fn budget_total(&self) -> usize {
        self.budget_total
    }

    pub fn budget_used(&self) -> usize {
        self.ledger.lock().unwrap().used
    }

    pub fn budget_remaining(&self) -> usize {
        self.budget_total - self.budget_used()
    }

    /// Query the target for the hard label of one sample.
    ///
    /// Debits the budget and records the sample identity; repeating an id or
    /// exceeding the budget is an error, not a silent pass-through.
    pub fn query_label(&self, id: u64, x: &Tensor) -> Result<usize> {
        let mut ledger = self.ledger.lock().unwrap();
        if ledger.ids.contains(&id) {
            return Err(Error::RepeatedQuery { id });
        }
        if ledger.used >= self.budget_total {
            return Err(Error::BudgetExhausted { budget: self.budget_total });
        }
        let batch = Tensor::stack(std::slice::from_ref(x))?;
        let label = self.target.predict(&batch)?[0];
        ledger.used += 1;
        let counter = ledger.used;
        ledger.ids.insert(id);
        ledger.entries.push(LedgerEntry { id, counter, label });
        Ok(label)
    }

    /// Label a uniformly random subset of `n` samples, once, and split the
    /// data into the labeled pool and the remaining unlabeled pool.
    ///
    /// This is performed a single time per experiment; every budget unit an
    /// experiment spends is spent here.
    pub fn build_initial_pool(
        &self,
        data: &[(u64, Tensor)],
        n: usize,
        seed: u64,
    ) -> Result<(Vec<LabeledSample>, Vec<(u64, Tensor)>)> {
        if n > data.len() {
            return Err(Error::contract(
                "build_initial_pool",
                format!("requested {n} labels from {} samples", data.len()),
            ));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let mut labeled = Vec::with_capacity(n);
        for &i in order.iter().take(n) {
            let (id, ref x) = data[i];
            let y = self.query_label(id, x)?;
            labeled.push(LabeledSample { id, x: x.clone(), y });
        }
        let unlabeled: Vec<(u64, Tensor)> =
            order.iter().skip(n).map(|&i| data[i].clone()).collect();
        Ok((labeled, unlabeled))
    }

    pub fn ledger_entries(&self) -> Vec<LedgerEntry> {
        self.ledger.lock().unwrap().entries.clone()
    }

    /// Line-oriented audit log: `id <TAB> counter <TAB> label`.
    pub fn export_ledger(&self) -> String {
        let mut out = String::new();
        for e in self.ledger.lock().unwrap().entries.iter() {
            out.push_str(&format!("{}\t{}\t{}\n", e.id, e.counter, e.label));
        }
        out
    }

}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ArchSpec;

    fn identity_target(k: usize) -> Model {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Model::build(&ArchSpec::Mlp { hidden: vec![] }, &[k], k, &mut rng).unwrap();
        for p in m.params_mut() {
            p.data_mut().fill(0.0);
        }
        {
            let mut ps = m.params_mut();
            for i in 0..k {
                ps[0].data_mut()[i * k + i] = 1.0;
            }
        }
        m
    }

    fn one_hot(k: usize, class: usize) -> Tensor {
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Tensor::new(vec![k], v).unwrap()
    }

    #[test]
    fn fresh_oracle_labels_within_range_and_debits() {
        let oracle = Oracle::new(identity_target(4), 1);
        let y = oracle.query_label(7, &one_hot(4, 1)).unwrap();
        assert!(y < 4);
        assert_eq!(oracle.budget_used(), 1);
    }

    #[test]
    fn repeated_id_is_rejected_even_at_budget_edge() {
        let oracle = Oracle::new(identity_target(3), 1);
        oracle.query_label(5, &one_hot(3, 0)).unwrap();
        let err = oracle.query_label(5, &one_hot(3, 0)).unwrap_err();
        assert_eq!(err, Error::RepeatedQuery { id: 5 });
    }

    #[test]
    fn budget_exhaustion_is_its_own_error() {
        let oracle = Oracle::new(identity_target(3), 1);
        oracle.query_label(1, &one_hot(3, 0)).unwrap();
        let err = oracle.query_label(2, &one_hot(3, 0)).unwrap_err();
        assert_eq!(err, Error::BudgetExhausted { budget: 1 });
    }

    #[test]
    fn identity_target_labels_one_hot_class_two() {
        let oracle = Oracle::new(identity_target(4), 8);
        assert_eq!(oracle.query_label(0, &one_hot(4, 2)).unwrap(), 2);
    }

    #[test]
    fn initial_pool_boundaries() {
        let oracle = Oracle::new(identity_target(3), 16);
        let data: Vec<(u64, Tensor)> = (0..10).map(|i| (i, one_hot(3, i as usize % 3))).collect();

        let (d0, d1) = oracle.build_initial_pool(&data, 10, 42).unwrap();
        assert_eq!(d0.len(), 10);
        assert!(d1.is_empty());

        let fresh = Oracle::new(identity_target(3), 16);
        let (d0, d1) = fresh.build_initial_pool(&data, 0, 42).unwrap();
        assert!(d0.is_empty());
        assert_eq!(d1.len(), 10);
        assert_eq!(fresh.budget_used(), 0);
    }

    #[test]
    fn initial_pool_partitions_and_replays_deterministically() {
        let data: Vec<(u64, Tensor)> = (0..10).map(|i| (i, one_hot(3, i as usize % 3))).collect();
        let pick = |seed: u64| {
            let oracle = Oracle::new(identity_target(3), 4);
            let (d0, d1) = oracle.build_initial_pool(&data, 4, seed).unwrap();
            assert_eq!(oracle.budget_used(), 4);
            let mut all: Vec<u64> =
                d0.iter().map(|s| s.id).chain(d1.iter().map(|(id, _)| *id)).collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<u64>>());
            d0.iter().map(|s| s.id).collect::<Vec<u64>>()
        };
        assert_eq!(pick(123), pick(123));
        assert_ne!(pick(123), pick(124));
    }

    #[test]
    fn ledger_export_lines_match_queries() {
        let oracle = Oracle::new(identity_target(3), 4);
        oracle.query_label(9, &one_hot(3, 1)).unwrap();
        oracle.query_label(4, &one_hot(3, 2)).unwrap();
        let log = oracle.export_ledger();
        assert_eq!(log, "9\t1\t1\n4\t2\t2\n");
        assert_eq!(oracle.ledger_entries().len(), 2);
    }

    #[test]
    fn queries_are_reproducible_against_a_frozen_target() {
        // The oracle owns a clone; querying must be a pure read of it.
        let target = identity_target(3);
        let oracle = Oracle::new(target.clone(), 8);
        let first: Vec<usize> =
            (0..8).map(|i| oracle.query_label(i, &one_hot(3, i as usize % 3)).unwrap()).collect();
        let again = Oracle::new(target, 8);
        let second: Vec<usize> =
            (0..8).map(|i| again.query_label(i, &one_hot(3, i as usize % 3)).unwrap()).collect();
        assert_eq!(first, second);
    }
}
