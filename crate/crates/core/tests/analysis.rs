use moat_core::analysis::{ablation_cost_table, cost_report, count_flops, count_params, AblationSuite, CostSink};
use moat_core::blocks::{AttnWindow, Block, BlockKind, BlockSpec};
use moat_core::nn::{Dense, Hw, ParamBuilder};
use moat_core::zoo::{family_config, micro_config, Architecture, FAMILY};

fn arch(name: &str) -> Architecture {
    Architecture::build(&family_config(name).unwrap()).unwrap()
}

#[test]
fn dense_layer_counts() {
    let mut pb = ParamBuilder::new();
    let d = Dense::declare(&mut pb, "d", 4, 3, true).unwrap();
    let mut sink = CostSink::new();
    d.cost(&mut sink, 1);
    assert_eq!(sink.rows()[0].params, 15);
    assert_eq!(sink.rows()[0].flops, 12);

    let mut pb = ParamBuilder::new();
    let d = Dense::declare(&mut pb, "d", 768, 1000, true).unwrap();
    let mut sink = CostSink::new();
    d.cost(&mut sink, 1);
    assert_eq!(sink.rows()[0].flops, 768_000);
}

#[test]
fn mbconv_block_closed_form() {
    let (c, hw) = (8usize, 4usize);
    let mut pb = ParamBuilder::new();
    let block = Block::build(&mut pb, "b", BlockSpec::new(BlockKind::MbConv, c, c, 1), Hw::square(hw)).unwrap();
    let mut sink = CostSink::new();
    block.cost(&mut sink, Hw::square(hw));

    let mid = 4 * c;
    let se = c / 4;
    let a = hw * hw;
    let bn = |ch: usize| 2 * ch;
    let params = bn(c)                     // pre-norm
        + c * mid + bn(mid)                // expand + norm
        + 9 * mid + bn(mid)                // depthwise + norm
        + (mid * se + se) + (se * mid + mid) // SE
        + (mid * c + c); // project
    let flops = a * c                      // pre-norm
        + a * c * mid + a * mid + a * mid  // expand, norm, gelu
        + a * 9 * mid + a * mid + a * mid  // depthwise, norm, gelu
        + a * mid + mid * se + se + se * mid + mid + a * mid // SE: pool, fc1, act, fc2, sigmoid, scale
        + a * mid * c                      // project
        + a * c; // residual add
    let got_p: u64 = sink.rows().iter().map(|r| r.params).sum();
    let got_f: u64 = sink.rows().iter().map(|r| r.flops).sum();
    assert_eq!(got_p, params as u64);
    assert_eq!(got_f, flops as u64);
}

#[test]
fn totals_equal_row_sums() {
    for name in FAMILY {
        let r = cost_report(&arch(name), 224).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|x| x.params).sum::<u64>());
        assert_eq!(r.total_flops, r.rows.iter().map(|x| x.flops).sum::<u64>());
        assert_eq!(r.total_params, count_params(&arch(name)));
    }
}

#[test]
fn params_are_independent_of_input_size() {
    let a = arch("moat-0");
    assert_eq!(cost_report(&a, 224).unwrap().total_params, cost_report(&a, 384).unwrap().total_params);
}

#[test]
fn counts_do_not_depend_on_weights() {
    let cfg = micro_config([16, 16, 32, 32, 64], 64, 10);
    let a = moat_core::zoo::Model::<f64>::new(&cfg, 1).unwrap();
    let b = moat_core::zoo::Model::<f64>::new(&cfg, 2).unwrap();
    assert_ne!(a.store.entries()[0].value, b.store.entries()[0].value);
    assert_eq!(cost_report(&a.arch, 64).unwrap(), cost_report(&b.arch, 64).unwrap());
}

fn kind_flops(a: &Architecture, size: usize, kind: &str) -> u64 {
    cost_report(a, size).unwrap().rows.iter().filter(|r| r.kind == kind).map(|r| r.flops).sum()
}

#[test]
fn conv_rows_scale_with_area() {
    let a = arch("moat-1");
    let ratio = kind_flops(&a, 384, "conv") as f64 / kind_flops(&a, 224, "conv") as f64;
    let want = (384.0f64 / 224.0).powi(2);
    assert!((ratio / want - 1.0).abs() < 0.01, "{ratio} vs {want}");
}

#[test]
fn doubling_the_side_scales_conv_by_4_and_global_attention_by_16() {
    let a = arch("tiny-moat-0");
    for kind in ["conv", "depthwise_conv"] {
        assert_eq!(kind_flops(&a, 448, kind), 4 * kind_flops(&a, 224, kind), "{kind}");
    }
    assert_eq!(kind_flops(&a, 448, "attention"), 16 * kind_flops(&a, 224, "attention"));
    // Windowed attention is linear in the number of tokens instead.
    let mut cfg = family_config("tiny-moat-0").unwrap();
    cfg.rel_bias = false;
    cfg.window_plan = vec![AttnWindow::Global, AttnWindow::Global, AttnWindow::Global, AttnWindow::Window(7), AttnWindow::Window(7)];
    let w = Architecture::build(&cfg).unwrap();
    assert_eq!(kind_flops(&w, 448, "attention"), 4 * kind_flops(&w, 224, "attention"));
}

#[test]
fn family_costs_match_published_columns() {
    let published = [
        ("moat-0", 27.8, 5.7),
        ("moat-1", 41.6, 9.1),
        ("moat-2", 73.4, 17.2),
        ("moat-3", 190.0, 44.9),
        ("tiny-moat-0", 3.4, 0.8),
        ("tiny-moat-1", 5.1, 1.2),
        ("tiny-moat-2", 9.8, 2.3),
    ];
    for (name, p, f) in published {
        let a = arch(name);
        let pm = count_params(&a) as f64 / 1e6;
        let fb = count_flops(&a, 224).unwrap() as f64 / 1e9;
        assert!((pm / p - 1.0).abs() <= 0.03, "{name} params {pm:.2}M vs {p}M");
        assert!((fb / f - 1.0).abs() <= 0.08, "{name} flops {fb:.2}B vs {f}B");
    }
    // The largest member is only published with its parameter count and at 512².
    let a = arch("moat-4");
    assert!((count_params(&a) as f64 / 1e6 / 483.2 - 1.0).abs() <= 0.03);
    let fb = count_flops(&a, 512).unwrap() as f64 / 1e9;
    assert!((fb / 648.5 - 1.0).abs() <= 0.08, "moat-4 at 512: {fb:.1}B");
}

#[test]
fn ablation_tables_are_within_tolerance_and_keep_the_ranking() {
    for suite in AblationSuite::ALL {
        let t = ablation_cost_table(suite, suite.default_layout()).unwrap();
        assert!(t.ranking_violations().is_empty(), "{suite:?}: {:?}", t.ranking_violations());
        for r in &t.rows {
            let (p, f) = r.reference.unwrap();
            assert!((r.params_m() / p - 1.0).abs() <= 0.03, "{suite:?} {}: {:.2}M vs {p}", r.variant, r.params_m());
            assert!((r.flops_b() / f - 1.0).abs() <= 0.08, "{suite:?} {}: {:.2}B vs {f}", r.variant, r.flops_b());
        }
    }
}

#[test]
fn meta_layouts_trade_params_for_flops() {
    let t = ablation_cost_table(AblationSuite::Meta, "moat-1").unwrap();
    assert_eq!(t.rows.len(), 5);
    for w in t.rows.windows(2) {
        assert!(w[1].params < w[0].params && w[1].flops > w[0].flops);
    }
}

#[test]
fn unknown_layout_is_an_error() {
    assert!(ablation_cost_table(AblationSuite::Block, "moat-9").is_err());
    assert!("nope".parse::<AblationSuite>().is_err());
}
