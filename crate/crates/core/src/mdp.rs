//! Finite reward-free MDPs, policies and policy-induced transition operators.
//!
//! The k-step policy operator is assembled as `P_rep^k · π̃` where
//! `P_rep^k = K · [P_{a_1}^k; …; P_{a_|A|}^k]` stacks the per-action k-step
//! matrices in action-major order and `K` reorders them to state-major order.
//! `π̃` is the block-diagonal `|S| × |S·A|` matrix of policy rows.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{check_row_stochastic, STOCHASTIC_TOL};

/// Four-rooms, 13×13, 104 free cells.
pub const FOURROOMS13: &str = include_str!("../data/fourrooms13.txt");
/// Small single-path maze, 9×9.
pub const MAZE9: &str = include_str!("../data/maze9.txt");
/// Branching maze, 13×13.
pub const MAZE13: &str = include_str!("../data/maze13.txt");
/// L-shaped corridor whose optimal route turns once.
pub const CORRIDOR_TURN: &str = include_str!("../data/corridor_turn.txt");

/// Action indices of gridworlds built by [`build_gridworld`].
pub const UP: usize = 0;
pub const DOWN: usize = 1;
pub const LEFT: usize = 2;
pub const RIGHT: usize = 3;
const MOVES: [(isize, isize); 4] = [(-1, 0), (1, 0), (0, -1), (0, 1)];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridLayout {
    rows: Vec<String>,
    width: usize,
    /// Row-major cell grid; `Some(i)` for the i-th free cell.
    index: Vec<Option<usize>>,
    free: Vec<(usize, usize)>,
}

impl GridLayout {
    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn n_free(&self) -> usize {
        self.free.len()
    }

    /// Free cells as `(row, col)` in state-index order.
    pub fn free_cells(&self) -> &[(usize, usize)] {
        &self.free
    }

    pub fn state_at(&self, row: usize, col: usize) -> Option<usize> {
        if row >= self.height() || col >= self.width {
            return None;
        }
        self.index[row * self.width + col]
    }

    pub fn cell_of(&self, state: usize) -> Option<(usize, usize)> {
        self.free.get(state).copied()
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_layout(&text)
    }

    /// Layouts shipped with the crate: `fourrooms13`, `maze9`, `maze13`,
    /// `corridor_turn`.
    pub fn builtin(name: &str) -> Result<Self> {
        let text = match name {
            "fourrooms13" => FOURROOMS13,
            "maze9" => MAZE9,
            "maze13" => MAZE13,
            "corridor_turn" => CORRIDOR_TURN,
            other => return Err(Error::Layout(format!("no builtin layout `{other}`"))),
        };
        parse_layout(text)
    }
}

/// Parses a `#`/`.` grid. Free cells are numbered row-major.
pub fn parse_layout(text: &str) -> Result<GridLayout> {
    let mut lines: Vec<&str> = text.split('\n').map(|l| l.trim_end_matches('\r')).collect();
    while lines.last().is_some_and(|l| l.is_empty()) {
        lines.pop();
    }
    if lines.is_empty() {
        return Err(Error::Layout("empty layout".into()));
    }
    let width = lines[0].chars().count();
    if width == 0 {
        return Err(Error::Layout("first row is empty".into()));
    }
    let height = lines.len();
    let mut index = Vec::with_capacity(width * height);
    let mut free = Vec::new();
    for (r, line) in lines.iter().enumerate() {
        let n = line.chars().count();
        if n != width {
            return Err(Error::Layout(format!(
                "row {r} has {n} cells, expected {width}"
            )));
        }
        for (c, ch) in line.chars().enumerate() {
            match ch {
                '#' => index.push(None),
                '.' => {
                    let border = r == 0 || c == 0 || r + 1 == height || c + 1 == width;
                    if border {
                        return Err(Error::Layout(format!(
                            "free cell ({r}, {c}) on the border"
                        )));
                    }
                    index.push(Some(free.len()));
                    free.push((r, c));
                }
                other => {
                    return Err(Error::Layout(format!(
                        "unknown character {other:?} at ({r}, {c})"
                    )))
                }
            }
        }
    }
    if free.is_empty() {
        return Err(Error::Layout("no free cells".into()));
    }
    Ok(GridLayout {
        rows: lines.iter().map(|s| s.to_string()).collect(),
        width,
        index,
        free,
    })
}

/// Finite reward-free MDP with dense per-action transition matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    per_action: Vec<DMatrix<f64>>,
    gamma: f64,
}

impl TabularMdp {
    pub fn new(per_action: Vec<DMatrix<f64>>, gamma: f64) -> Result<Self> {
        check_discount(gamma)?;
        let first = per_action
            .first()
            .ok_or_else(|| Error::Dimension("MDP needs at least one action".into()))?;
        let n = first.nrows();
        if n == 0 {
            return Err(Error::Dimension("MDP needs at least one state".into()));
        }
        for (a, p) in per_action.iter().enumerate() {
            if p.shape() != (n, n) {
                return Err(Error::Dimension(format!(
                    "action {a} matrix is {:?}, expected ({n}, {n})",
                    p.shape()
                )));
            }
            check_row_stochastic(p, STOCHASTIC_TOL, &format!("P_{a}"))?;
        }
        Ok(TabularMdp { per_action, gamma })
    }

    pub fn n_states(&self) -> usize {
        self.per_action[0].nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.per_action.len()
    }

    /// `|S| · |A|`.
    pub fn n_pairs(&self) -> usize {
        self.n_states() * self.n_actions()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn transition(&self, action: usize) -> &DMatrix<f64> {
        &self.per_action[action]
    }

    pub fn transitions(&self) -> &[DMatrix<f64>] {
        &self.per_action
    }

    pub fn with_gamma(&self, gamma: f64) -> Result<Self> {
        check_discount(gamma)?;
        Ok(TabularMdp {
            per_action: self.per_action.clone(),
            gamma,
        })
    }
}

pub(crate) fn check_discount(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma < 1.0 {
        Ok(())
    } else {
        Err(Error::Discount(gamma))
    }
}

/// Four-action gridworld. The intended move happens with probability
/// `1 - slip`; each of the other three moves with `slip / 3`. Moves into walls
/// leave the agent in place.
pub fn build_gridworld(layout: &GridLayout, gamma: f64, slip: f64) -> Result<TabularMdp> {
    check_discount(gamma)?;
    if !(0.0..1.0).contains(&slip) {
        return Err(Error::InvalidArgument(format!("slip {slip} outside [0, 1)")));
    }
    let n = layout.n_free();
    let destination = |state: usize, mv: usize| -> usize {
        let (r, c) = layout.free[state];
        let (dr, dc) = MOVES[mv];
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        if nr < 0 || nc < 0 {
            return state;
        }
        layout
            .state_at(nr as usize, nc as usize)
            .unwrap_or(state)
    };
    let per_action = (0..MOVES.len())
        .map(|action| {
            let mut p = DMatrix::zeros(n, n);
            for s in 0..n {
                for mv in 0..MOVES.len() {
                    let prob = if mv == action { 1.0 - slip } else { slip / 3.0 };
                    if prob > 0.0 {
                        p[(s, destination(s, mv))] += prob;
                    }
                }
            }
            p
        })
        .collect();
    TabularMdp::new(per_action, gamma)
}

/// Row-stochastic `|S| × |A|` matrix of action probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    probs: DMatrix<f64>,
}

impl Policy {
    pub fn new(probs: DMatrix<f64>) -> Result<Self> {
        if probs.nrows() == 0 || probs.ncols() == 0 {
            return Err(Error::Dimension("empty policy".into()));
        }
        check_row_stochastic(&probs, 1e-9, "policy")?;
        Ok(Policy { probs })
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Policy {
            probs: DMatrix::from_element(n_states, n_actions, 1.0 / n_actions as f64),
        }
    }

    pub fn deterministic(actions: &[usize], n_actions: usize) -> Result<Self> {
        let mut probs = DMatrix::zeros(actions.len(), n_actions);
        for (s, &a) in actions.iter().enumerate() {
            if a >= n_actions {
                return Err(Error::Dimension(format!(
                    "action {a} at state {s} out of range for {n_actions} actions"
                )));
            }
            probs[(s, a)] = 1.0;
        }
        Policy::new(probs)
    }

    pub fn probs(&self) -> &DMatrix<f64> {
        &self.probs
    }

    pub fn n_states(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_actions(&self) -> usize {
        self.probs.ncols()
    }

    /// Mixes with the uniform policy: `(1 - eps)·π + eps·uniform`.
    pub fn mix_uniform(&self, eps: f64) -> Self {
        let na = self.n_actions() as f64;
        Policy {
            probs: self.probs.map(|p| (1.0 - eps) * p + eps / na),
        }
    }

    /// Block-diagonal `|S| × |S·A|` matrix whose row `s` holds `π(·|s)` at
    /// columns `s·|A| .. (s+1)·|A|`.
    pub fn block(&self) -> DMatrix<f64> {
        let (ns, na) = self.probs.shape();
        let mut block = DMatrix::zeros(ns, ns * na);
        for s in 0..ns {
            for a in 0..na {
                block[(s, s * na + a)] = self.probs[(s, a)];
            }
        }
        block
    }
}

/// Index permutation stored as a map; row `i` of `K · X` is row `map[i]` of `X`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn from_map(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &j in &map {
            if j >= map.len() || std::mem::replace(&mut seen[j], true) {
                return Err(Error::InvalidArgument("map is not a permutation".into()));
            }
        }
        Ok(Permutation { map })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            map: (0..n).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn map(&self) -> &[usize] {
        &self.map
    }

    pub fn apply(&self, i: usize) -> usize {
        self.map[i]
    }

    /// The transpose, which for a permutation is its inverse.
    pub fn transpose(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &j) in self.map.iter().enumerate() {
            inv[j] = i;
        }
        Permutation { map: inv }
    }

    /// Matrix product `self · other` as index maps.
    pub fn compose(&self, other: &Permutation) -> Self {
        assert_eq!(self.len(), other.len());
        Permutation {
            map: self.map.iter().map(|&j| other.map[j]).collect(),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &j)| i == j)
    }

    /// `K · x` without materializing `K`.
    pub fn gather_rows(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(x.nrows(), self.len());
        DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| x[(self.map[i], j)])
    }

    /// Dense 0/1 matrix, for audits.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut k = DMatrix::zeros(n, n);
        for (i, &j) in self.map.iter().enumerate() {
            k[(i, j)] = 1.0;
        }
        k
    }
}

/// Maps the state-major index `s·|A| + a` to the action-major index `a·|S| + s`.
pub fn commutation_matrix(n_states: usize, n_actions: usize) -> Permutation {
    let mut map = Vec::with_capacity(n_states * n_actions);
    for s in 0..n_states {
        for a in 0..n_actions {
            map.push(a * n_states + s);
        }
    }
    Permutation { map }
}

/// Policy-induced state-action operator together with its factor parts.
#[derive(Debug, Clone)]
pub struct PolicyOperator {
    pub p_pi: DMatrix<f64>,
    pub p_rep_k: DMatrix<f64>,
    pub pi_block: DMatrix<f64>,
    pub commutation: Permutation,
    pub repeat_k: usize,
}

impl PolicyOperator {
    pub fn n_pairs(&self) -> usize {
        self.p_pi.nrows()
    }

    /// `‖P^π − P_rep^k · π̃‖_max`.
    pub fn factorization_residual(&self) -> f64 {
        crate::linalg::max_abs_diff(&self.p_pi, &(&self.p_rep_k * &self.pi_block))
    }
}

fn check_policy_dims(mdp: &TabularMdp, policy: &Policy) -> Result<()> {
    if policy.n_states() != mdp.n_states() || policy.n_actions() != mdp.n_actions() {
        return Err(Error::Dimension(format!(
            "policy is {}x{}, MDP has {} states and {} actions",
            policy.n_states(),
            policy.n_actions(),
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    Ok(())
}

/// One-step operator `P^π[(s,a),(s',a')] = P(s'|s,a) · π(a'|s')`, filled entry
/// by entry.
pub fn policy_operator(mdp: &TabularMdp, policy: &Policy) -> Result<PolicyOperator> {
    check_policy_dims(mdp, policy)?;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());
    let n = ns * na;
    let probs = policy.probs();
    let mut p_pi = DMatrix::zeros(n, n);
    let mut p_rep = DMatrix::zeros(n, ns);
    for s in 0..ns {
        for a in 0..na {
            let row = s * na + a;
            let pa = mdp.transition(a);
            for s2 in 0..ns {
                let p = pa[(s, s2)];
                p_rep[(row, s2)] = p;
                if p == 0.0 {
                    continue;
                }
                for a2 in 0..na {
                    p_pi[(row, s2 * na + a2)] = p * probs[(s2, a2)];
                }
            }
        }
    }
    Ok(PolicyOperator {
        p_pi,
        p_rep_k: p_rep,
        pi_block: policy.block(),
        commutation: commutation_matrix(ns, na),
        repeat_k: 1,
    })
}

fn matrix_power(p: &DMatrix<f64>, k: usize) -> DMatrix<f64> {
    let mut result = p.clone();
    for _ in 1..k {
        result = &result * p;
    }
    result
}

/// Per-action k-step matrices `P_a^k`.
pub fn repeated_transitions(mdp: &TabularMdp, k: usize) -> Result<Vec<DMatrix<f64>>> {
    if k == 0 {
        return Err(Error::ZeroRepeat);
    }
    Ok(mdp
        .transitions()
        .iter()
        .map(|p| matrix_power(p, k))
        .collect())
}

/// `P_rep^k = K · [P_{a_1}^k; …; P_{a_|A|}^k]`, shape `|S·A| × |S|`.
pub fn repetition_block(mdp: &TabularMdp, k: usize) -> Result<DMatrix<f64>> {
    let powers = repeated_transitions(mdp, k)?;
    let ns = mdp.n_states();
    let na = mdp.n_actions();
    let mut stacked = DMatrix::zeros(ns * na, ns);
    for (a, pk) in powers.iter().enumerate() {
        stacked.view_mut((a * ns, 0), (ns, ns)).copy_from(pk);
    }
    Ok(commutation_matrix(ns, na).gather_rows(&stacked))
}

/// k-step operator of the action-repeat MDP as the product `P_rep^k · π̃`.
pub fn repeat_operator(mdp: &TabularMdp, policy: &Policy, k: usize) -> Result<PolicyOperator> {
    check_policy_dims(mdp, policy)?;
    let p_rep_k = repetition_block(mdp, k)?;
    let pi_block = policy.block();
    let p_pi = &p_rep_k * &pi_block;
    Ok(PolicyOperator {
        p_pi,
        p_rep_k,
        pi_block,
        commutation: commutation_matrix(mdp.n_states(), mdp.n_actions()),
        repeat_k: k,
    })
}

/// Action-repeat MDP: transitions `P_a^k`, discount `γ^k`.
pub fn repeat_mdp(mdp: &TabularMdp, k: usize) -> Result<TabularMdp> {
    if k == 0 {
        return Err(Error::ZeroRepeat);
    }
    if k == 1 {
        return Ok(mdp.clone());
    }
    let per_action = repeated_transitions(mdp, k)?
        .into_iter()
        .map(|mut p| {
            renormalize_rows(&mut p);
            p
        })
        .collect();
    TabularMdp::new(per_action, mdp.gamma().powi(k as i32))
}

// Long products drift off the simplex by a few ulps.
fn renormalize_rows(p: &mut DMatrix<f64>) {
    for mut row in p.row_iter_mut() {
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            row.scale_mut(1.0 / sum);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MdpClass {
    General,
    DoublyStochastic,
    Lazy,
}

impl MdpClass {
    pub const ALL: [MdpClass; 3] = [MdpClass::DoublyStochastic, MdpClass::Lazy, MdpClass::General];

    pub fn as_str(self) -> &'static str {
        match self {
            MdpClass::General => "general",
            MdpClass::DoublyStochastic => "doubly_stochastic",
            MdpClass::Lazy => "lazy",
        }
    }
}

impl fmt::Display for MdpClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MdpClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "general" => Ok(MdpClass::General),
            "doubly_stochastic" | "doubly-stochastic" => Ok(MdpClass::DoublyStochastic),
            "lazy" => Ok(MdpClass::Lazy),
            other => Err(Error::UnknownClass(other.to_string())),
        }
    }
}

const BIRKHOFF_TERMS: usize = 4;

/// Seeded random MDP. `general` rows are Dirichlet(1) draws; `doubly_stochastic`
/// matrices are random convex combinations of permutation matrices; `lazy` is
/// `0.5·I + 0.5·D` with `D` doubly stochastic.
pub fn random_mdp(
    n_states: usize,
    n_actions: usize,
    seed: u64,
    class: MdpClass,
    gamma: f64,
) -> Result<TabularMdp> {
    if n_states == 0 || n_actions == 0 {
        return Err(Error::Dimension("sizes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_action = (0..n_actions)
        .map(|_| match class {
            MdpClass::General => random_general(n_states, &mut rng),
            MdpClass::DoublyStochastic => random_doubly_stochastic(n_states, &mut rng),
            MdpClass::Lazy => {
                let d = random_doubly_stochastic(n_states, &mut rng);
                DMatrix::identity(n_states, n_states) * 0.5 + d * 0.5
            }
        })
        .collect();
    TabularMdp::new(per_action, gamma)
}

fn dirichlet_ones(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let draws: Vec<f64> = (0..n)
        .map(|_| -(1.0 - rng.gen::<f64>()).ln() + 1e-12)
        .collect();
    let total: f64 = draws.iter().sum();
    draws.into_iter().map(|x| x / total).collect()
}

fn random_general(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(n, n);
    for s in 0..n {
        for (j, w) in dirichlet_ones(n, rng).into_iter().enumerate() {
            p[(s, j)] = w;
        }
    }
    p
}

fn random_doubly_stochastic(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let weights = dirichlet_ones(BIRKHOFF_TERMS, rng);
    let mut p = DMatrix::zeros(n, n);
    let mut perm: Vec<usize> = (0..n).collect();
    for w in weights {
        perm.shuffle(rng);
        for (i, &j) in perm.iter().enumerate() {
            p[(i, j)] += w;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{max_abs_diff, singular_values_only};

    fn corridor2(slip: f64) -> TabularMdp {
        let layout = parse_layout("####\n#..#\n####").unwrap();
        build_gridworld(&layout, 0.9, slip).unwrap()
    }

    fn swap_chain(n_actions: usize) -> TabularMdp {
        let swap = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        TabularMdp::new(vec![swap; n_actions], 0.5).unwrap()
    }

    #[test]
    fn parse_minimal_grid() {
        let layout = parse_layout("###\n#.#\n###").unwrap();
        assert_eq!(layout.n_free(), 1);
        assert_eq!(layout.state_at(1, 1), Some(0));
    }

    #[test]
    fn parse_assigns_row_major_indices() {
        let layout = parse_layout("####\n#..#\n####\n").unwrap();
        assert_eq!(layout.free_cells(), &[(1, 1), (1, 2)]);
        assert_eq!(layout.state_at(1, 2), Some(1));
    }

    #[test]
    fn fourrooms_has_104_free_cells() {
        let oracle = FOURROOMS13.chars().filter(|&c| c == '.').count();
        let layout = GridLayout::builtin("fourrooms13").unwrap();
        assert_eq!(oracle, 104);
        assert_eq!(layout.n_free(), oracle);
        assert_eq!((layout.height(), layout.width()), (13, 13));
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse_layout(""), Err(Error::Layout(_))));
        assert!(matches!(parse_layout("###\n##\n###"), Err(Error::Layout(_))));
        assert!(matches!(parse_layout("###\n#x#\n###"), Err(Error::Layout(_))));
        assert!(matches!(parse_layout("###\n###"), Err(Error::Layout(_))));
        assert!(matches!(parse_layout("#.#\n###"), Err(Error::Layout(_))));
    }

    #[test]
    fn builtin_layouts_parse() {
        for name in ["fourrooms13", "maze9", "maze13", "corridor_turn"] {
            GridLayout::builtin(name).unwrap();
        }
    }

    #[test]
    fn single_cell_moves_are_blocked() {
        let layout = parse_layout("###\n#.#\n###").unwrap();
        let mdp = build_gridworld(&layout, 0.9, 0.0).unwrap();
        for a in 0..4 {
            assert_eq!(mdp.transition(a), &DMatrix::from_element(1, 1, 1.0));
        }
    }

    #[test]
    fn deterministic_corridor_move() {
        let mdp = corridor2(0.0);
        assert_eq!(mdp.transition(RIGHT)[(0, 1)], 1.0);
        assert_eq!(mdp.transition(LEFT)[(0, 0)], 1.0);
    }

    #[test]
    fn slip_row_matches_enumeration() {
        // Right from cell 0: intended move w.p. 0.7 reaches cell 1; up, down
        // and left (0.1 each) are blocked.
        let mdp = corridor2(0.3);
        let row = mdp.transition(RIGHT).row(0).clone_owned();
        assert!((row[0] - 0.3).abs() < 1e-15);
        assert!((row[1] - 0.7).abs() < 1e-15);
        // Left from cell 1: intended w.p. 0.7 to cell 0, the right slip stays.
        let row = mdp.transition(LEFT).row(1).clone_owned();
        assert!((row[0] - 0.7).abs() < 1e-15);
        assert!((row[1] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn gridworld_rejects_bad_discount() {
        let layout = parse_layout("###\n#.#\n###").unwrap();
        assert!(matches!(build_gridworld(&layout, 1.0, 0.0), Err(Error::Discount(_))));
        assert!(matches!(build_gridworld(&layout, 0.0, 0.0), Err(Error::Discount(_))));
    }

    #[test]
    fn policy_operator_trivial() {
        let mdp = TabularMdp::new(vec![DMatrix::from_element(1, 1, 1.0)], 0.9).unwrap();
        let op = policy_operator(&mdp, &Policy::uniform(1, 1)).unwrap();
        assert_eq!(op.p_pi, DMatrix::from_element(1, 1, 1.0));
    }

    #[test]
    fn policy_operator_swap_chain() {
        let mdp = swap_chain(2);
        let op = policy_operator(&mdp, &Policy::uniform(2, 2)).unwrap();
        // From state 0 either action lands in state 1, whose two actions get
        // 0.5 each: columns 2 and 3. From state 1: columns 0 and 1.
        #[rustfmt::skip]
        let expected = DMatrix::from_row_slice(4, 4, &[
            0.0, 0.0, 0.5, 0.5,
            0.0, 0.0, 0.5, 0.5,
            0.5, 0.5, 0.0, 0.0,
            0.5, 0.5, 0.0, 0.0,
        ]);
        assert_eq!(op.p_pi, expected);
    }

    #[test]
    fn policy_operator_dimension_mismatch() {
        let mdp = swap_chain(2);
        assert!(matches!(
            policy_operator(&mdp, &Policy::uniform(3, 2)),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn policy_rejects_non_stochastic_rows() {
        let probs = DMatrix::from_row_slice(1, 2, &[0.7, 0.7]);
        assert!(matches!(Policy::new(probs), Err(Error::NotStochastic(_))));
    }

    #[test]
    fn commutation_small_cases() {
        assert!(commutation_matrix(1, 5).is_identity());
        assert!(commutation_matrix(5, 1).is_identity());
        assert_eq!(commutation_matrix(2, 2).map(), &[0, 2, 1, 3]);
        let k = commutation_matrix(3, 4);
        assert!(k.compose(&k.transpose()).is_identity());
        let dense = k.to_dense();
        assert_eq!(&dense * dense.transpose(), DMatrix::identity(12, 12));
    }

    #[test]
    fn gather_rows_matches_dense_product() {
        let k = commutation_matrix(3, 2);
        let x = DMatrix::from_fn(6, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(k.gather_rows(&x), k.to_dense() * &x);
    }

    #[test]
    fn repeat_operator_k1_matches_direct() {
        let mdp = random_mdp(5, 3, 7, MdpClass::General, 0.9).unwrap();
        let policy = Policy::uniform(5, 3);
        let direct = policy_operator(&mdp, &policy).unwrap();
        let factored = repeat_operator(&mdp, &policy, 1).unwrap();
        assert!(max_abs_diff(&direct.p_pi, &factored.p_pi) <= 1e-12);
        assert!(factored.factorization_residual() <= 1e-12);
    }

    #[test]
    fn repeat_operator_swap_square_is_lifted_policy() {
        let mdp = swap_chain(1);
        let op = repeat_operator(&mdp, &Policy::uniform(2, 1), 2).unwrap();
        assert!(max_abs_diff(&op.p_pi, &DMatrix::identity(2, 2)) <= 1e-15);
        assert!(matches!(
            repeat_operator(&mdp, &Policy::uniform(2, 1), 0),
            Err(Error::ZeroRepeat)
        ));
    }

    #[test]
    fn repeat_mdp_cases() {
        let mdp = swap_chain(2).with_gamma(0.95).unwrap();
        assert_eq!(repeat_mdp(&mdp, 1).unwrap(), mdp);
        let r = repeat_mdp(&mdp, 10).unwrap();
        assert!((r.gamma() - 0.598_736_939_238_378_9).abs() < 1e-15);
        let sq = repeat_mdp(&mdp, 2).unwrap();
        for a in 0..2 {
            assert_eq!(sq.transition(a), &DMatrix::identity(2, 2));
        }
        assert!(matches!(repeat_mdp(&mdp, 0), Err(Error::ZeroRepeat)));
    }

    #[test]
    fn random_mdp_one_state() {
        for class in MdpClass::ALL {
            let mdp = random_mdp(1, 3, 0, class, 0.9).unwrap();
            for p in mdp.transitions() {
                assert_eq!(p, &DMatrix::from_element(1, 1, 1.0));
            }
        }
    }

    #[test]
    fn doubly_stochastic_columns_sum_to_one() {
        let mdp = random_mdp(3, 2, 11, MdpClass::DoublyStochastic, 0.9).unwrap();
        for p in mdp.transitions() {
            for col in p.column_iter() {
                assert!((col.sum() - 1.0).abs() <= 1e-12);
            }
            let sv = singular_values_only(p).unwrap();
            assert!((sv[0] - 1.0).abs() <= 1e-9);
        }
    }

    #[test]
    fn random_mdp_is_seeded() {
        for class in MdpClass::ALL {
            let a = random_mdp(6, 2, 42, class, 0.9).unwrap();
            let b = random_mdp(6, 2, 42, class, 0.9).unwrap();
            assert_eq!(a, b);
        }
        assert!("bogus".parse::<MdpClass>().is_err());
        assert_eq!("lazy".parse::<MdpClass>().unwrap(), MdpClass::Lazy);
    }
}
