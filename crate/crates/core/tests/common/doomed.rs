//! Doomed-set graph oracle, written without the binary operator.
//!
//! D_0 = insecure states, D_{k+1} = D_k plus every state all of whose
//! successors lie in D_k. A state is doomed iff it ends up in the limit;
//! the critic value of `(s, a)` is then `s insecure or F(s, a) doomed`.

use safecritic::env::FiniteMdp;

pub fn doomed_states(mdp: &FiniteMdp) -> Vec<bool> {
    let n = mdp.num_states();
    let mut doomed: Vec<bool> = (0..n).map(|s| mdp.is_insecure(s)).collect();
    loop {
        let grown: Vec<bool> = (0..n)
            .map(|s| doomed[s] || (0..mdp.num_actions()).all(|a| doomed[mdp.successor(s, a)]))
            .collect();
        if grown == doomed {
            return doomed;
        }
        doomed = grown;
    }
}

pub fn doomed_critic(mdp: &FiniteMdp) -> Vec<bool> {
    let doomed = doomed_states(mdp);
    let mut bits = Vec::with_capacity(mdp.num_states() * mdp.num_actions());
    for s in 0..mdp.num_states() {
        for a in 0..mdp.num_actions() {
            bits.push(mdp.is_insecure(s) || doomed[mdp.successor(s, a)]);
        }
    }
    bits
}
