//! Transportation simplex (u-v method) for balanced discrete transport.

use crate::error::{Error, Result};

const MASS_EPS: f64 = 1e-15;

/// Minimizes `Σ γ_ij c_ij` over couplings of `supply` and `demand`.
/// `cost` is row-major `supply.len() × demand.len()`. Returns the optimal
/// value and the coupling.
pub fn solve(supply: &[f64], demand: &[f64], cost: &[f64]) -> Result<(f64, Vec<f64>)> {
    let m = supply.len();
    let n = demand.len();
    if m == 0 || n == 0 || cost.len() != m * n {
        return Err(Error::Solver(
            "empty or inconsistent transport problem".into(),
        ));
    }
    let total_s: f64 = supply.iter().sum();
    let total_d: f64 = demand.iter().sum();
    let demand: Vec<f64> = demand.iter().map(|d| d * total_s / total_d).collect();

    let mut flow = vec![0.0; m * n];
    let mut basic = vec![false; m * n];
    northwest_corner(supply, &demand, &mut flow, &mut basic);

    let scale = cost.iter().fold(0.0f64, |a, c| a.max(c.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let guard = 50 * (m + n) * (m + n) + 1000;
    let mut u = vec![0.0; m];
    let mut v = vec![0.0; n];
    for iter in 0..2 * guard {
        potentials(m, n, cost, &basic, &mut u, &mut v);
        let bland = iter >= guard;
        let mut entering = None;
        let mut best = -tol;
        'pricing: for i in 0..m {
            for j in 0..n {
                let cell = i * n + j;
                if basic[cell] {
                    continue;
                }
                let reduced = cost[cell] - u[i] - v[j];
                if reduced < best {
                    entering = Some((i, j));
                    if bland {
                        break 'pricing;
                    }
                    best = reduced;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            let value = flow.iter().zip(cost).map(|(f, c)| f * c).sum();
            return Ok((value, flow));
        };
        let cycle = tree_path(m, n, &basic, ej, ei);
        // cells on the path alternate −, +, −, ... starting next to column ej
        let (leave_pos, theta) = cycle
            .iter()
            .enumerate()
            .step_by(2)
            .map(|(pos, &c)| (pos, flow[c]))
            .fold((usize::MAX, f64::INFINITY), |acc, x| {
                if x.1 < acc.1 {
                    x
                } else {
                    acc
                }
            });
        flow[ei * n + ej] += theta;
        basic[ei * n + ej] = true;
        for (pos, &c) in cycle.iter().enumerate() {
            if pos % 2 == 0 {
                flow[c] = (flow[c] - theta).max(0.0);
            } else {
                flow[c] += theta;
            }
        }
        let leaving = cycle[leave_pos];
        flow[leaving] = 0.0;
        basic[leaving] = false;
    }
    Err(Error::Solver(
        "transportation simplex did not terminate".into(),
    ))
}

fn northwest_corner(supply: &[f64], demand: &[f64], flow: &mut [f64], basic: &mut [bool]) {
    let (m, n) = (supply.len(), demand.len());
    let mut s = supply.to_vec();
    let mut d = demand.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = s[i].min(d[j]).max(0.0);
        flow[i * n + j] = q;
        basic[i * n + j] = true;
        s[i] -= q;
        d[j] -= q;
        if i == m - 1 && j == n - 1 {
            break;
        }
        let row_done = s[i] <= MASS_EPS;
        if (row_done && i < m - 1) || j == n - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    // leftover rounding mass goes to the last cell
    flow[m * n - 1] += s[m - 1].max(0.0);
}

/// Solves `u_i + v_j = c_ij` on the basis tree with `u_0 = 0`.
fn potentials(m: usize, n: usize, cost: &[f64], basic: &[bool], u: &mut [f64], v: &mut [f64]) {
    let mut row_set = vec![false; m];
    let mut col_set = vec![false; n];
    let mut stack = vec![(true, 0usize)];
    u[0] = 0.0;
    row_set[0] = true;
    while let Some((is_row, k)) = stack.pop() {
        if is_row {
            for j in 0..n {
                if basic[k * n + j] && !col_set[j] {
                    v[j] = cost[k * n + j] - u[k];
                    col_set[j] = true;
                    stack.push((false, j));
                }
            }
        } else {
            for i in 0..m {
                if basic[i * n + k] && !row_set[i] {
                    u[i] = cost[i * n + k] - v[k];
                    row_set[i] = true;
                    stack.push((true, i));
                }
            }
        }
    }
}

/// Basic cells on the tree path from column `col` to row `row`.
fn tree_path(m: usize, n: usize, basic: &[bool], col: usize, row: usize) -> Vec<usize> {
    // graph nodes: rows 0..m, columns m..m+n
    let total = m + n;
    let mut parent = vec![usize::MAX; total];
    let start = m + col;
    parent[start] = start;
    let mut queue = std::collections::VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == row {
            break;
        }
        if node < m {
            for j in 0..n {
                if basic[node * n + j] && parent[m + j] == usize::MAX {
                    parent[m + j] = node;
                    queue.push_back(m + j);
                }
            }
        } else {
            let j = node - m;
            for i in 0..m {
                if basic[i * n + j] && parent[i] == usize::MAX {
                    parent[i] = node;
                    queue.push_back(i);
                }
            }
        }
    }
    let mut cells = Vec::new();
    let mut node = row;
    while node != start {
        let p = parent[node];
        let cell = if node < m {
            node * n + (p - m)
        } else {
            p * n + (node - m)
        };
        cells.push(cell);
        node = p;
    }
    cells.reverse();
    cells
}
