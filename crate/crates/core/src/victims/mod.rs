//! The victim corpus: small IR ports of the classic leaky routines, each
//! with machine-readable ground truth.
//!
//! Every victim is flat — conditionals sit on the always-executed path and
//! loops have fixed trip counts — so the branch-obfuscation pass can make
//! their direct-branch traces input-independent. Secrets leak only through
//! branch directions. String/memory conditions from the originals are
//! pre-lowered to 0/1 predicate inputs (the IR has no memory); the lowering
//! is described per victim in `secret_schema`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::ir::{assemble, InputMap, Program, VirtualAddress};

/// Fuel bound generous enough for every corpus victim.
pub const VICTIM_FUEL: u64 = 20_000;

type Decoder = fn(&Program, &[(VirtualAddress, bool)]) -> Option<Value>;

/// One victim: program, input model, and the leak oracle pair
/// (ground truth from the secret, decoder from branch outcomes).
pub struct VictimSpec {
    pub name: &'static str,
    pub program: Program,
    pub secret_schema: &'static str,
    pub leak_description: &'static str,
    /// A conditional branch whose outcome is a fair coin under
    /// [`VictimSpec::gen_input`]; used by balanced inference experiments.
    pub balanced_branch: VirtualAddress,
    gen: fn(&mut ChaCha8Rng) -> InputMap,
    truth: fn(&InputMap) -> Value,
    decode: Decoder,
}

impl VictimSpec {
    pub fn gen_input(&self, rng: &mut ChaCha8Rng) -> InputMap {
        (self.gen)(rng)
    }

    /// Expected leak, computed from the secret inputs alone.
    pub fn ground_truth(&self, input: &InputMap) -> Value {
        (self.truth)(input)
    }

    /// Leak reconstructed from conditional branch outcomes
    /// (`(address, taken)` pairs in execution order).
    pub fn decode(&self, outcomes: &[(VirtualAddress, bool)]) -> Option<Value> {
        (self.decode)(&self.program, outcomes)
    }

    /// Like [`VictimSpec::decode`], but against a relocated or transformed
    /// copy of the program (label addresses travel with the transform).
    pub fn decode_with(
        &self,
        program: &Program,
        outcomes: &[(VirtualAddress, bool)],
    ) -> Option<Value> {
        (self.decode)(program, outcomes)
    }
}

pub fn all() -> Vec<VictimSpec> {
    vec![
        build_strtol(),
        build_vfprintf(),
        build_modexp_montmul(),
        build_libsvm_kernel(),
        build_apache_lookup(),
    ]
}

pub fn by_name(name: &str) -> Option<VictimSpec> {
    all().into_iter().find(|v| v.name == name)
}

fn input(pairs: &[(String, u64)]) -> InputMap {
    pairs.iter().cloned().collect()
}

/// Outcomes of the conditional branch labeled `label`, in execution order.
fn outcomes_at(program: &Program, outcomes: &[(VirtualAddress, bool)], label: &str) -> Vec<bool> {
    let addr = program.label(label).expect("decoder label exists");
    outcomes
        .iter()
        .filter(|(a, _)| *a == addr)
        .map(|(_, t)| *t)
        .collect()
}

fn one_outcome(
    program: &Program,
    outcomes: &[(VirtualAddress, bool)],
    label: &str,
) -> Option<bool> {
    let o = outcomes_at(program, outcomes, label);
    if o.len() == 1 {
        Some(o[0])
    } else {
        None
    }
}

const STRTOL_SLOTS: usize = 8;

/// Sign check plus a fixed 8-slot digit scan; each slot branches on
/// "still inside the number" and on "this digit is alphabetic" (hex).
pub fn build_strtol() -> VictimSpec {
    let mut src = String::from(".base 0x10000\n    set r1, $neg\nsgn: cbr r1, sgn_t\n    set r2, 1\n    jmp sgn_j\nsgn_t:\n    set r2, 2\nsgn_j:\n");
    for i in 0..STRTOL_SLOTS {
        src.push_str(&format!(
            "    set r3, lt {i}, $len\n\
             \x20   set r4, and r3, $alpha{i}\n\
             act{i}: cbr r3, act_t{i}\n\
             \x20   set r14, add r14, 1\n\
             \x20   jmp act_j{i}\n\
             act_t{i}:\n\
             \x20   set r5, add r5, 1\n\
             act_j{i}:\n\
             alp{i}: cbr r4, alp_t{i}\n\
             \x20   set r14, add r14, 1\n\
             \x20   jmp alp_j{i}\n\
             alp_t{i}:\n\
             \x20   set r6, add r6, 1\n\
             alp_j{i}:\n"
        ));
    }
    src.push_str("    halt\n");
    let program = assemble(&src).expect("strtol assembles");
    let balanced_branch = program.label("sgn").unwrap();
    VictimSpec {
        name: "strtol",
        program,
        secret_schema: "neg: sign bit; len: digit count in 1..=8; alpha0..alpha7: per-digit is-alphabetic flag (hex input, pre-lowered from character class checks)",
        leak_description: "sign, digit count, and per-digit alpha flags, one conditional each",
        balanced_branch,
        gen: |rng| {
            let len = rng.random_range(1..=STRTOL_SLOTS as u64);
            let mut pairs = vec![
                ("neg".to_string(), u64::from(rng.random_bool(0.5))),
                ("len".to_string(), len),
            ];
            for i in 0..STRTOL_SLOTS {
                pairs.push((format!("alpha{i}"), u64::from(rng.random_bool(0.5))));
            }
            input(&pairs)
        },
        truth: |inp| {
            let len = inp["len"] as usize;
            let alpha: Vec<bool> =
                (0..len).map(|i| inp[&format!("alpha{i}")] != 0).collect();
            json!({
                "sign": if inp["neg"] != 0 { "neg" } else { "pos" },
                "len": len,
                "alpha": alpha,
            })
        },
        decode: |p, o| {
            let neg = one_outcome(p, o, "sgn")?;
            let mut len = 0usize;
            let mut alpha = Vec::new();
            for i in 0..STRTOL_SLOTS {
                let active = one_outcome(p, o, &format!("act{i}"))?;
                let alpha_i = one_outcome(p, o, &format!("alp{i}"))?;
                if active {
                    len += 1;
                    alpha.push(alpha_i);
                }
            }
            Some(json!({
                "sign": if neg { "neg" } else { "pos" },
                "len": len,
                "alpha": alpha,
            }))
        },
    }
}

const VFPRINTF_SLOTS: usize = 6;
const VFPRINTF_KINDS: [(&str, &str); 4] = [
    ("d", "T_INT"),
    ("x", "T_UINT"),
    ("s", "T_PTR"),
    ("f", "T_DOUBLE"),
];

/// A fixed 6-slot format scan: each slot is a literal or one of four
/// conversions, dispatched through per-kind conditionals.
pub fn build_vfprintf() -> VictimSpec {
    let mut src = String::from(".base 0x20000\n");
    for i in 0..VFPRINTF_SLOTS {
        src.push_str(&format!(
            "    set r1, $conv{i}\n\
             \x20   set r2, eq r1, 0\n\
             \x20   set r2, eq r2, 0\n\
             \x20   set r3, eq r1, 1\n\
             \x20   set r4, eq r1, 2\n\
             \x20   set r5, eq r1, 3\n\
             \x20   set r6, eq r1, 4\n"
        ));
        for (k, reg) in [
            ("cv", "r2"),
            ("kd", "r3"),
            ("kx", "r4"),
            ("ks", "r5"),
            ("kf", "r6"),
        ] {
            src.push_str(&format!(
                "{k}{i}: cbr {reg}, {k}_t{i}\n\
                 \x20   set r14, add r14, 1\n\
                 \x20   jmp {k}_j{i}\n\
                 {k}_t{i}:\n\
                 \x20   set r15, add r15, 1\n\
                 {k}_j{i}:\n"
            ));
        }
    }
    src.push_str("    halt\n");
    let program = assemble(&src).expect("vfprintf assembles");
    let balanced_branch = program.label("cv0").unwrap();
    VictimSpec {
        name: "vfprintf",
        program,
        secret_schema: "conv0..conv5: per-slot conversion code (0 literal, 1 %d, 2 %x, 3 %s, 4 %f), pre-lowered from format-string character scanning",
        leak_description: "conversion kind sequence and the implied argument type table",
        balanced_branch,
        gen: |rng| {
            let pairs: Vec<(String, u64)> = (0..VFPRINTF_SLOTS)
                .map(|i| {
                    let code = if rng.random_bool(0.5) {
                        0
                    } else {
                        rng.random_range(1..=4)
                    };
                    (format!("conv{i}"), code)
                })
                .collect();
            input(&pairs)
        },
        truth: |inp| {
            let mut convs = Vec::new();
            let mut args = Vec::new();
            for i in 0..VFPRINTF_SLOTS {
                let code = inp[&format!("conv{i}")] as usize;
                if code > 0 {
                    let (name, ty) = VFPRINTF_KINDS[code - 1];
                    convs.push(name);
                    args.push(ty);
                }
            }
            json!({ "convs": convs, "args": args })
        },
        decode: |p, o| {
            let mut convs = Vec::new();
            let mut args = Vec::new();
            for i in 0..VFPRINTF_SLOTS {
                let is_conv = one_outcome(p, o, &format!("cv{i}"))?;
                let kinds = [
                    one_outcome(p, o, &format!("kd{i}"))?,
                    one_outcome(p, o, &format!("kx{i}"))?,
                    one_outcome(p, o, &format!("ks{i}"))?,
                    one_outcome(p, o, &format!("kf{i}"))?,
                ];
                if is_conv {
                    let k = kinds.iter().position(|t| *t)?;
                    if kinds.iter().filter(|t| **t).count() != 1 {
                        return None;
                    }
                    let (name, ty) = VFPRINTF_KINDS[k];
                    convs.push(name);
                    args.push(ty);
                } else if kinds.iter().any(|t| *t) {
                    return None;
                }
            }
            Some(json!({ "convs": convs, "args": args }))
        },
    }
}

const MODEXP_BITS: u32 = 64;

/// Square-and-multiply over a 64-bit exponent: the per-bit conditional
/// selects the real multiply against the dummy path, so its outcome
/// sequence is the exponent, low bit first.
pub fn build_modexp_montmul() -> VictimSpec {
    let src = format!(
        ".base 0x30000\n\
         \x20   set r1, $exp\n\
         \x20   set r2, {MODEXP_BITS}\n\
         \x20   set r3, 1\n\
         lp:\n\
         \x20   set r3, add r3, r3\n\
         \x20   set r4, and r1, 1\n\
         bit: cbr r4, bit_t\n\
         \x20   set r14, add r14, 1\n\
         \x20   jmp bit_j\n\
         bit_t:\n\
         \x20   set r3, add r3, 1\n\
         bit_j:\n\
         \x20   set r1, shr r1, 1\n\
         \x20   set r2, sub r2, 1\n\
         \x20   set r5, eq r2, 0\n\
         \x20   set r5, eq r5, 0\n\
         \x20   cbr r5, lp\n\
         \x20   halt\n"
    );
    let program = assemble(&src).expect("modexp assembles");
    let balanced_branch = program.label("bit").unwrap();
    VictimSpec {
        name: "modexp",
        program,
        secret_schema: "exp: 64-bit secret exponent",
        leak_description: "per-iteration multiply-vs-dummy conditional; outcomes spell the exponent bits LSB first",
        balanced_branch,
        gen: |rng| input(&[("exp".to_string(), rng.random())]),
        truth: |inp| json!({ "exponent": inp["exp"] }),
        decode: |p, o| {
            let bits = outcomes_at(p, o, "bit");
            if bits.len() != MODEXP_BITS as usize {
                return None;
            }
            let exp = bits
                .iter()
                .enumerate()
                .fold(0u64, |acc, (i, b)| acc | (u64::from(*b) << i));
            Some(json!({ "exponent": exp }))
        },
    }
}

const LIBSVM_MAX_FEATURES: u64 = 12;

/// Kernel-type dispatch plus a fixed 12-trip feature loop whose
/// "still inside the vector" conditional counts the RBF feature length.
pub fn build_libsvm_kernel() -> VictimSpec {
    let src = format!(
        ".base 0x40000\n\
         \x20   set r1, $kernel\n\
         \x20   set r2, eq r1, 2\n\
         \x20   set r3, eq r1, 0\n\
         \x20   set r4, eq r1, 1\n\
         \x20   set r5, eq r1, 3\n\
         rbf: cbr r2, rbf_t\n\
         \x20   set r14, add r14, 1\n\
         \x20   jmp rbf_j\n\
         rbf_t:\n\
         \x20   set r15, add r15, 1\n\
         rbf_j:\n\
         lin: cbr r3, lin_t\n\
         \x20   set r14, add r14, 1\n\
         \x20   jmp lin_j\n\
         lin_t:\n\
         \x20   set r15, add r15, 1\n\
         lin_j:\n\
         pol: cbr r4, pol_t\n\
         \x20   set r14, add r14, 1\n\
         \x20   jmp pol_j\n\
         pol_t:\n\
         \x20   set r15, add r15, 1\n\
         pol_j:\n\
         sig: cbr r5, sig_t\n\
         \x20   set r14, add r14, 1\n\
         \x20   jmp sig_j\n\
         sig_t:\n\
         \x20   set r15, add r15, 1\n\
         sig_j:\n\
         \x20   set r6, 0\n\
         \x20   set r7, $nfeat\n\
         lp:\n\
         \x20   set r8, lt r6, r7\n\
         ft: cbr r8, ft_t\n\
         \x20   set r14, add r14, 1\n\
         \x20   jmp ft_j\n\
         ft_t:\n\
         \x20   set r15, add r15, 1\n\
         ft_j:\n\
         \x20   set r6, add r6, 1\n\
         \x20   set r9, lt r6, {LIBSVM_MAX_FEATURES}\n\
         \x20   cbr r9, lp\n\
         \x20   halt\n"
    );
    let program = assemble(&src).expect("libsvm assembles");
    let balanced_branch = program.label("rbf").unwrap();
    VictimSpec {
        name: "libsvm",
        program,
        secret_schema:
            "kernel: 0 LINEAR, 1 POLY, 2 RBF, 3 SIGMOID; nfeat: feature-vector length in 1..=12",
        leak_description:
            "kernel-type dispatch conditionals plus the RBF loop's feature-count conditional",
        balanced_branch,
        gen: |rng| {
            let kernel = if rng.random_bool(0.5) {
                2
            } else {
                [0u64, 1, 3][rng.random_range(0..3)]
            };
            input(&[
                ("kernel".to_string(), kernel),
                (
                    "nfeat".to_string(),
                    rng.random_range(1..=LIBSVM_MAX_FEATURES),
                ),
            ])
        },
        truth: |inp| {
            let name = ["LINEAR", "POLY", "RBF", "SIGMOID"][inp["kernel"] as usize];
            if name == "RBF" {
                json!({ "kernel": name, "features": inp["nfeat"] })
            } else {
                json!({ "kernel": name })
            }
        },
        decode: |p, o| {
            let flags = [
                one_outcome(p, o, "lin")?,
                one_outcome(p, o, "pol")?,
                one_outcome(p, o, "rbf")?,
                one_outcome(p, o, "sig")?,
            ];
            if flags.iter().filter(|t| **t).count() != 1 {
                return None;
            }
            let kernel =
                ["LINEAR", "POLY", "RBF", "SIGMOID"][flags.iter().position(|t| *t).unwrap()];
            let trips = outcomes_at(p, o, "ft");
            if trips.len() != LIBSVM_MAX_FEATURES as usize {
                return None;
            }
            if kernel == "RBF" {
                let features = trips.iter().filter(|t| **t).count();
                Some(json!({ "kernel": kernel, "features": features }))
            } else {
                Some(json!({ "kernel": kernel }))
            }
        },
    }
}

const APACHE_METHODS: [(&str, u64, u8); 6] = [
    ("M_GET", 3, b'G'),
    ("M_PUT", 3, b'P'),
    ("M_POST", 4, b'P'),
    ("M_HEAD", 4, b'H'),
    ("M_MERGE", 5, b'M'),
    ("M_DELETE", 6, b'D'),
];

/// Method lookup dispatching on (length, first character), the two
/// pre-lowered inputs of the original switch nest.
pub fn build_apache_lookup() -> VictimSpec {
    let mut src = String::from(
        ".base 0x50000\n\
         \x20   set r1, $len\n\
         \x20   set r2, $c0\n\
         \x20   set r3, eq r1, 3\n\
         \x20   set r4, eq r1, 4\n\
         \x20   set r5, eq r1, 5\n\
         \x20   set r6, eq r1, 6\n\
         \x20   set r7, eq r2, 71\n\
         \x20   set r7, and r3, r7\n\
         \x20   set r8, eq r2, 80\n\
         \x20   set r9, and r3, r8\n\
         \x20   set r10, and r4, r8\n\
         \x20   set r11, eq r2, 72\n\
         \x20   set r11, and r4, r11\n\
         \x20   set r12, eq r2, 77\n\
         \x20   set r12, and r5, r12\n\
         \x20   set r13, eq r2, 68\n\
         \x20   set r13, and r6, r13\n",
    );
    for (label, reg) in [
        ("l3", "r3"),
        ("get", "r7"),
        ("put", "r9"),
        ("post", "r10"),
        ("head", "r11"),
        ("merge", "r12"),
        ("delete", "r13"),
    ] {
        src.push_str(&format!(
            "{label}: cbr {reg}, {label}_t\n\
             \x20   set r14, add r14, 1\n\
             \x20   jmp {label}_j\n\
             {label}_t:\n\
             \x20   set r15, add r15, 1\n\
             {label}_j:\n"
        ));
    }
    src.push_str("    halt\n");
    let program = assemble(&src).expect("apache assembles");
    let balanced_branch = program.label("l3").unwrap();
    VictimSpec {
        name: "apache",
        program,
        secret_schema: "len: method-name length; c0: ASCII code of the first character (pre-lowered from the string switch nest)",
        leak_description: "length-class conditional plus one per-method match conditional",
        balanced_branch,
        gen: |rng| {
            // Length-3 methods get half the mass so the `l3` conditional
            // is a fair coin.
            let idx = if rng.random_bool(0.5) {
                rng.random_range(0..2)
            } else {
                rng.random_range(2..APACHE_METHODS.len())
            };
            let (_, len, c0) = APACHE_METHODS[idx];
            input(&[("len".to_string(), len), ("c0".to_string(), u64::from(c0))])
        },
        truth: |inp| {
            let name = APACHE_METHODS
                .iter()
                .find(|(_, len, c0)| *len == inp["len"] && u64::from(*c0) == inp["c0"])
                .map(|(n, _, _)| *n)
                .expect("inputs name a known method");
            json!({ "method": name })
        },
        decode: |p, o| {
            let labels = ["get", "put", "post", "head", "merge", "delete"];
            let mut hit = None;
            for (i, label) in labels.iter().enumerate() {
                if one_outcome(p, o, label)? {
                    if hit.is_some() {
                        return None;
                    }
                    hit = Some(i);
                }
            }
            Some(json!({ "method": APACHE_METHODS[hit?].0 }))
        },
    }
}

#[cfg(test)]
mod tests;
