use num_bigint::BigUint;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use super::*;
use crate::ir::{assemble, interpret, Instruction};
use crate::zigzagger::{leakage_check, transform, ZigzaggerConfig};

fn outcomes(v: &VictimSpec, input: &InputMap) -> Vec<(VirtualAddress, bool)> {
    let trace = interpret(&v.program, v.program.base(), input, VICTIM_FUEL).expect("victim runs");
    assert!(!trace.fuel_exhausted);
    trace.conditional_outcomes(&v.program)
}

fn leak_via_trace(v: &VictimSpec, input: &InputMap) -> serde_json::Value {
    v.decode(&outcomes(v, input)).expect("decodable trace")
}

#[test]
fn corpus_programs_are_small_and_clean() {
    for v in all() {
        assert!(
            v.program.len() <= 200,
            "{} has {} instructions",
            v.name,
            v.program.len()
        );
        assert!(!v.program.uses_reserved_reg(), "{}", v.name);
        assert_eq!(v.program.base().0 % 0x1_0000, 0, "{}", v.name);
        assert_eq!(
            assemble(&v.program.print()).unwrap(),
            v.program,
            "{} round-trips",
            v.name
        );
        assert!(matches!(
            v.program.instruction_at(v.balanced_branch),
            Some(Instruction::CondBranch { .. })
        ));
    }
}

#[test]
fn ground_truth_matches_architectural_trace() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5ec7);
    for v in all() {
        for _ in 0..250 {
            let input = v.gen_input(&mut rng);
            assert_eq!(
                leak_via_trace(&v, &input),
                v.ground_truth(&input),
                "{} input {input:?}",
                v.name
            );
        }
    }
}

#[test]
fn balanced_branch_is_a_fair_coin() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for v in all() {
        let mut taken = 0u32;
        let trials = 2_000;
        for _ in 0..trials {
            let input = v.gen_input(&mut rng);
            let first = outcomes(&v, &input)
                .into_iter()
                .find(|(a, _)| *a == v.balanced_branch)
                .expect("balanced branch executes");
            taken += u32::from(first.1);
        }
        let rate = f64::from(taken) / f64::from(trials);
        assert!((0.42..=0.58).contains(&rate), "{}: {rate}", v.name);
    }
}

#[test]
fn strtol_examples() {
    let v = build_strtol();
    // "-42"
    let mut neg42 = input(&[("neg".into(), 1), ("len".into(), 2)]);
    for i in 0..8 {
        neg42.insert(format!("alpha{i}"), 0);
    }
    assert_eq!(
        leak_via_trace(&v, &neg42),
        json!({"sign": "neg", "len": 2, "alpha": [false, false]})
    );
    // "+0"
    let mut pos0 = neg42.clone();
    pos0.insert("neg".into(), 0);
    pos0.insert("len".into(), 1);
    assert_eq!(
        leak_via_trace(&v, &pos0),
        json!({"sign": "pos", "len": 1, "alpha": [false]})
    );
    // "1A" base 16: second digit alphabetic.
    let mut hex = neg42.clone();
    hex.insert("neg".into(), 0);
    hex.insert("alpha1".into(), 1);
    assert_eq!(
        leak_via_trace(&v, &hex),
        json!({"sign": "pos", "len": 2, "alpha": [false, true]})
    );
}

#[test]
fn vfprintf_examples() {
    let v = build_vfprintf();
    let fmt = |codes: [u64; 6]| {
        input(
            &codes
                .iter()
                .enumerate()
                .map(|(i, c)| (format!("conv{i}"), *c))
                .collect::<Vec<_>>(),
        )
    };
    // "%d%x"
    assert_eq!(
        leak_via_trace(&v, &fmt([1, 2, 0, 0, 0, 0])),
        json!({"convs": ["d", "x"], "args": ["T_INT", "T_UINT"]})
    );
    // ""
    assert_eq!(
        leak_via_trace(&v, &fmt([0; 6])),
        json!({"convs": [], "args": []})
    );
    // "%d%f"
    assert_eq!(
        leak_via_trace(&v, &fmt([1, 4, 0, 0, 0, 0])),
        json!({"convs": ["d", "f"], "args": ["T_INT", "T_DOUBLE"]})
    );
}

#[test]
fn modexp_examples_and_bigint_oracle() {
    let v = build_modexp_montmul();
    let run = |e: u64| leak_via_trace(&v, &input(&[("exp".into(), e)]));
    assert_eq!(run(0b1011), json!({"exponent": 0b1011}));
    // Zero exponent: the multiply branch is never taken (all-square path).
    let zero = input(&[("exp".into(), 0)]);
    assert!(outcomes(&v, &zero)
        .iter()
        .filter(|(a, _)| *a == v.program.label("bit").unwrap())
        .all(|(_, taken)| !taken));
    assert_eq!(run(0), json!({"exponent": 0}));

    // Recovered exponents drive a real modular exponentiation to the same
    // result as the secret ones.
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let modulus = BigUint::from(1_000_003u64);
    let base = BigUint::from(7u64);
    for _ in 0..2 {
        let secret: u64 = rand::Rng::random(&mut rng);
        let leaked = run(secret)["exponent"].as_u64().unwrap();
        assert_eq!(leaked, secret);
        assert_eq!(
            base.modpow(&BigUint::from(leaked), &modulus),
            base.modpow(&BigUint::from(secret), &modulus)
        );
    }
}

#[test]
fn libsvm_examples() {
    let v = build_libsvm_kernel();
    let run =
        |k: u64, n: u64| leak_via_trace(&v, &input(&[("kernel".into(), k), ("nfeat".into(), n)]));
    assert_eq!(run(2, 8), json!({"kernel": "RBF", "features": 8}));
    assert_eq!(run(0, 5), json!({"kernel": "LINEAR"}));
    assert_eq!(run(3, 1), json!({"kernel": "SIGMOID"}));
}

#[test]
fn apache_examples() {
    let v = build_apache_lookup();
    let run = |len: u64, c0: u8| {
        leak_via_trace(
            &v,
            &input(&[("len".into(), len), ("c0".into(), u64::from(c0))]),
        )
    };
    assert_eq!(run(3, b'G'), json!({"method": "M_GET"}));
    assert_eq!(run(3, b'P'), json!({"method": "M_PUT"}));
    assert_eq!(run(5, b'M'), json!({"method": "M_MERGE"}));
}

#[test]
fn untransformed_victims_leak_but_transformed_do_not() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xbeef);
    for v in all() {
        let (t, _) = transform(&v.program, &ZigzaggerConfig::all(1)).unwrap();
        let mut saw_leak = false;
        for _ in 0..20 {
            let a = v.gen_input(&mut rng);
            let b = v.gen_input(&mut rng);
            if !leakage_check(&v.program, &a, &b, VICTIM_FUEL).unwrap() {
                saw_leak = true;
            }
            assert!(
                leakage_check(&t, &a, &b, VICTIM_FUEL).unwrap(),
                "{} transformed still leaks for {a:?} vs {b:?}",
                v.name
            );
        }
        assert!(saw_leak, "{} never leaked untransformed", v.name);
    }
}

fn corpus_dir() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../corpus/v1")
}

fn corpus_examples(v: &VictimSpec) -> Vec<(InputMap, serde_json::Value)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    (0..8)
        .map(|_| {
            let input = v.gen_input(&mut rng);
            let leak = v.ground_truth(&input);
            (input, leak)
        })
        .collect()
}

/// Rewrites the shipped corpus. Run explicitly after changing a victim:
/// `cargo test -p shadowlab --lib regen_corpus -- --ignored`
#[test]
#[ignore]
fn regen_corpus() {
    let dir = corpus_dir();
    std::fs::create_dir_all(&dir).unwrap();
    for v in all() {
        std::fs::write(dir.join(format!("{}.ir", v.name)), v.program.print()).unwrap();
        let doc = json!({
            "name": v.name,
            "secret_schema": v.secret_schema,
            "leak": v.leak_description,
            "examples": corpus_examples(&v)
                .iter()
                .map(|(input, leak)| json!({ "input": input, "leak": leak }))
                .collect::<Vec<_>>(),
        });
        std::fs::write(
            dir.join(format!("{}.json", v.name)),
            serde_json::to_string_pretty(&doc).unwrap() + "\n",
        )
        .unwrap();
    }
}

#[test]
fn shipped_corpus_matches_builders() {
    let dir = corpus_dir();
    for v in all() {
        let ir = std::fs::read_to_string(dir.join(format!("{}.ir", v.name))).unwrap();
        assert_eq!(assemble(&ir).unwrap(), v.program, "{} IR drifted", v.name);

        let doc: serde_json::Value = serde_json::from_str(
            &std::fs::read_to_string(dir.join(format!("{}.json", v.name))).unwrap(),
        )
        .unwrap();
        assert_eq!(doc["name"], v.name);
        assert_eq!(doc["secret_schema"], v.secret_schema);
        let examples = doc["examples"].as_array().unwrap();
        assert_eq!(examples.len(), 8);
        for ex in examples {
            let input: InputMap = serde_json::from_value(ex["input"].clone()).unwrap();
            assert_eq!(
                ex["leak"],
                v.ground_truth(&input),
                "{} ground truth",
                v.name
            );
            assert_eq!(ex["leak"], leak_via_trace(&v, &input), "{} trace", v.name);
        }
    }
}

#[test]
fn by_name_resolves_corpus_members() {
    for name in ["strtol", "vfprintf", "modexp", "libsvm", "apache"] {
        assert_eq!(by_name(name).unwrap().name, name);
    }
    assert!(by_name("openssl").is_none());
}
