use super::graph::{Graph, NodeId};
use super::param::ParamStore;
use super::tensor::Tensor;
use crate::error::{MilError, Result};

/// Compares analytic gradients with central finite differences.
///
/// Returns the maximum over every trainable parameter entry of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`. Parameter values
/// are restored afterwards and gradients are left zeroed.
pub fn grad_check(
    graph: &mut Graph,
    loss: NodeId,
    params: &mut ParamStore,
    inputs: &[Tensor],
    eps: f64,
) -> Result<f64> {
    if !(1e-6..=1e-2).contains(&eps) {
        return Err(MilError::InvalidConfig(format!("eps {eps} outside [1e-6, 1e-2]")));
    }
    params.zero_grads();
    graph.forward(params, inputs)?;
    graph.backward(loss, params)?;
    let analytic: Vec<Tensor> = params.iter().map(|p| p.grad.clone()).collect();
    params.zero_grads();

    let mut worst = 0.0_f64;
    for id in params.ids().collect::<Vec<_>>() {
        if !params.get(id).trainable {
            continue;
        }
        for flat in 0..params.get(id).value.len() {
            let original = params.get(id).value.as_slice()[flat];
            let mut eval_at = |x: f64| -> Result<f64> {
                params.get_mut(id).value.as_mut_slice()[flat] = x;
                let out = graph
                    .forward(params, inputs)
                    .and_then(|_| graph.value(loss).map(|t| t.get(0, 0)));
                match out {
                    Ok(v) if v.is_finite() => Ok(v),
                    Ok(v) => Err(MilError::InvalidValue(format!("perturbed loss {v}"))),
                    Err(e) => Err(e),
                }
            };
            let plus = eval_at(original + eps);
            let minus = eval_at(original - eps);
            params.get_mut(id).value.as_mut_slice()[flat] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let a = analytic[id.0].as_slice()[flat];
            let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    // Leave the graph holding values for the unperturbed parameters.
    graph.forward(params, inputs)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param::Parameter;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn linear_model_is_exact() {
        let mut params = ParamStore::new();
        let w = params.push(Parameter::new(
            "w",
            Tensor::row_vector(&[0.2, -0.4, 1.5]).unwrap(),
            true,
        ));
        let mut g = Graph::new();
        let x = g.input();
        let wn = g.param(w);
        let p = g.mul(wn, x);
        let loss = g.sum(p);
        let err = grad_check(
            &mut g,
            loss,
            &mut params,
            &[Tensor::row_vector(&[1.0, 2.0, -3.0]).unwrap()],
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn eps_range_enforced() {
        let mut params = ParamStore::new();
        let mut g = Graph::new();
        let x = g.input();
        let loss = g.sum(x);
        assert!(grad_check(&mut g, loss, &mut params, &[Tensor::zeros(1, 1)], 0.1).is_err());
    }

    /// Every primitive in isolation on seeded random 3×4 tensors.
    #[test]
    fn each_primitive_matches_finite_differences() {
        type Build = fn(&mut Graph, NodeId, NodeId, NodeId) -> NodeId;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |g, a, _b, c| g.matmul(a, c)),
            ("add", |g, a, b, _c| g.add(a, b)),
            ("mul", |g, a, b, _c| g.mul(a, b)),
            ("add_row", |g, a, _b, c| {
                let r = g.transpose(c);
                g.add_row(a, r)
            }),
            ("mul_row", |g, a, _b, c| {
                let r = g.transpose(c);
                g.mul_row(a, r)
            }),
            ("tanh", |g, a, _b, _c| g.tanh(a)),
            ("sigmoid", |g, a, _b, _c| g.sigmoid(a)),
            ("relu", |g, a, _b, _c| g.relu(a)),
            ("softmax_rows", |g, a, _b, _c| g.softmax_rows(a)),
            ("log", |g, a, _b, _c| {
                let s = g.sigmoid(a);
                g.log(s)
            }),
            ("scale", |g, a, _b, _c| g.scale(a, -2.5)),
            ("mean", |g, a, _b, _c| g.mean(a)),
            ("transpose", |g, a, _b, _c| g.transpose(a)),
            ("concat_cols", |g, a, b, _c| g.concat_cols(&[a, b])),
        ];
        for (seed, (name, build)) in cases.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(seed as u64 + 100);
            let mut params = ParamStore::new();
            let a = params.push(Parameter::new("a", random(3, 4, &mut rng), true));
            let b = params.push(Parameter::new("b", random(3, 4, &mut rng), true));
            let c = params.push(Parameter::new("c", random(4, 1, &mut rng), true));
            let mut g = Graph::new();
            let (an, bn, cn) = (g.param(a), g.param(b), g.param(c));
            let out = build(&mut g, an, bn, cn);
            // Weight the output by a fixed random tensor so every entry matters.
            g.forward(&params, &[]).unwrap();
            let (r, cols) = g.value(out).unwrap().shape();
            let weights = g.constant(random(r, cols, &mut rng));
            let weighted = g.mul(out, weights);
            let loss = g.sum(weighted);
            let err = grad_check(&mut g, loss, &mut params, &[], 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }
}
