fn main() {
    use hdgt_core::decoder::mtp_loss;
    use hdgt_core::model::{Model, ModelConfig};
    use hdgt_core::scene::{generate_synthetic, preprocess, GeneratorConfig};
    use hdgt_core::tensor::gradcheck::relative_error;
    use hdgt_core::tensor::GradTable;

    let cfg = ModelConfig { hidden: 8, layers: 1, heads: 2, modes: 2, t_future: 3, ..Default::default() };
    let gen = GeneratorConfig { vehicles: 1, pedestrians: 1, cyclists: 0, lanes: 1, t_future: 3, ..Default::default() };
    let scene = generate_synthetic(1, &gen).unwrap();
    let model = Model::<f64>::new(cfg.clone(), 7).unwrap();
    let pre = preprocess(&scene);
    let graph = model.build_graph_for(&pre.scene);
    let targets: Vec<usize> = (0..graph.n_agents)
        .filter(|&i| pre.scene.agents[graph.nodes[i].element].is_target)
        .collect();

    let mut out = model.forward(&pre.scene, &graph).unwrap();
    let loss = mtp_loss(&model, &mut out, &pre, &graph, &targets).unwrap();
    out.tape.backward(loss.total).unwrap();
    let mut analytic = GradTable::zeros_like(&model.params);
    out.tape.grads_into(&mut analytic);

    let eval = |params: &hdgt_core::tensor::ParamTable<f64>| -> f64 {
        let mut probe = Model::<f64>::new(cfg.clone(), 7).unwrap();
        probe.params = params.clone();
        let mut o = probe.forward(&pre.scene, &graph).unwrap();
        let l = mtp_loss(&probe, &mut o, &pre, &graph, &targets).unwrap();
        o.tape.value(l.total).scalar_value()
    };

    let eps = 1e-6;
    let mut work = model.params.clone();
    let mut worst: Vec<(String, usize, f64, f64, f64)> = Vec::new();
    for (id, name, tensor) in model.params.iter() {
        for c in 0..tensor.numel() {
            let orig = tensor.data()[c];
            work.get_mut(id).data_mut()[c] = orig + eps;
            let up = eval(&work);
            work.get_mut(id).data_mut()[c] = orig - eps;
            let down = eval(&work);
            work.get_mut(id).data_mut()[c] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(id).map(|g| g.data()[c]).unwrap_or(0.0);
            let e = relative_error(a, numeric);
            if e > 1e-6 {
                worst.push((name.to_string(), c, a, numeric, e));
            }
        }
    }
    worst.sort_by(|x, y| y.4.partial_cmp(&x.4).unwrap());
    println!("{} bad coords", worst.len());
    for (name, c, a, n, e) in worst.iter().take(15) {
        println!("{name}[{c}]: analytic {a:.6e} numeric {n:.6e} rel {e:.3e}");
    }
}
