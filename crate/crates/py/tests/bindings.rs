use rtse::model::TextureModel;
use rtse_py::{far_sweep_json, parse_texture};

#[test]
fn texture_specs() {
    assert_eq!(parse_texture("unit").unwrap(), TextureModel::Unit);
    assert_eq!(parse_texture("inverse-gamma:2.5").unwrap(), TextureModel::InverseGamma { shape: 2.5 });
    assert!(parse_texture("inverse-gamma:-1").is_err());
    assert!(parse_texture("pareto").is_err());
}

#[test]
fn sweep_round_trips_through_json() {
    let plan = r#"{"dim": 4, "samples": 8, "rho_grid": [0.5], "gammas": [0.0],
                   "outer_trials": 2, "inner_trials": 5, "seed": 1}"#;
    let out: serde_json::Value = serde_json::from_str(&far_sweep_json(plan).unwrap()).unwrap();
    assert_eq!(out["curves"][0]["points"][0]["empirical"], 1.0);
    assert!(far_sweep_json(r#"{"dim": 4}"#).is_err());
}
