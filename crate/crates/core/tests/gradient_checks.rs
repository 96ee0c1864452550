use livestyle::ast::{all_pairs, AstModel, AstObjective, AstTrainConfig};
use livestyle::backbone::BackboneModel;
use livestyle::gatys::{GatysConfig, GatysObjective};
use livestyle::graph::Graph;
use livestyle::image::normalize;
use livestyle::synthetic::{noise, textures};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;
const AST_H: f64 = 1e-5;

fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

fn sample(len: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.gen_range(0..len)).collect()
}

#[test]
fn gatys_pixel_gradients_match_central_differences() {
    let model = BackboneModel::tiny(3);
    let spec = model.input_spec().clone();
    let content = normalize(&noise(16, 1), &spec).unwrap();
    let style = normalize(&textures(1, 16, 2)[0], &spec).unwrap();
    let cfg = GatysConfig::tiny();
    let obj = GatysObjective::new(&model, &content, &style, &cfg).unwrap();
    let x = normalize(&noise(16, 7), &spec).unwrap().to_nchw();
    let (_, grad) = obj.loss_and_gradient(&x).unwrap();
    for i in sample(x.numel(), 24, 11) {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let n = (obj.loss(&xp).unwrap().total - obj.loss(&xm).unwrap().total) / (2.0 * H);
        let err = relative_error(grad.data()[i], n);
        assert!(err < TOL, "pixel {i}: analytic {} numeric {n} err {err}", grad.data()[i]);
    }
}

#[test]
fn backbone_input_gradients_match_central_differences() {
    let model = BackboneModel::tiny(5);
    let x = normalize(&noise(16, 3), model.input_spec()).unwrap().to_nchw();
    let eval = |t: &livestyle::tensor::Tensor, grad: bool| {
        let mut g = Graph::new();
        let v = if grad { g.param(t.clone()) } else { g.constant(t.clone()) };
        let f = model.forward_graph(&mut g, v, &["relu3_1"]).unwrap();
        let loss = g.sum_squares(f["relu3_1"]);
        let value = g.value(loss).item();
        let grads = grad.then(|| g.backward(loss).get(v).cloned().unwrap());
        (value, grads)
    };
    let (_, grad) = eval(&x, true);
    let grad = grad.unwrap();
    for i in sample(x.numel(), 24, 4) {
        let mut xp = x.clone();
        xp.data_mut()[i] += H;
        let mut xm = x.clone();
        xm.data_mut()[i] -= H;
        let n = (eval(&xp, false).0 - eval(&xm, false).0) / (2.0 * H);
        let err = relative_error(grad.data()[i], n);
        assert!(err < TOL, "input {i}: analytic {} numeric {n} err {err}", grad.data()[i]);
    }
}

#[test]
fn ast_parameter_gradients_match_central_differences() {
    let model = BackboneModel::tiny(2);
    let cfg = AstTrainConfig::default();
    let ast = AstModel::new(4, 9);
    let contents = vec![noise(16, 1), noise(16, 2)];
    let styles = textures(1, 16, 3);
    let (c, s) = all_pairs(&contents, &styles).unwrap();
    let obj = AstObjective::new(&model, &cfg).unwrap();
    let (_, pg, tg) = obj.gradients(&ast, &c, &s).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut checked = 0;
    while checked < 24 {
        let predictor_side = checked % 2 == 0;
        let grads = if predictor_side { &pg } else { &tg };
        let slot = rng.gen_range(0..grads.len());
        let idx = rng.gen_range(0..grads[slot].numel());
        let a = grads[slot].data()[idx];
        if a.abs() < 1e-6 {
            continue;
        }
        let perturbed = |delta: f64| {
            let mut m = ast.clone();
            let store = if predictor_side {
                m.predictor.params_mut()
            } else {
                m.transfer.params_mut()
            };
            store.get_mut(slot).data_mut()[idx] += delta;
            obj.evaluate(&m, &c, &s).unwrap().total
        };
        let n = (perturbed(AST_H) - perturbed(-AST_H)) / (2.0 * AST_H);
        let err = relative_error(a, n);
        assert!(err < TOL, "param slot {slot} idx {idx}: analytic {a} numeric {n} err {err}");
        checked += 1;
    }
}
