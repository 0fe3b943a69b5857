//! Material model verification against independently computed references.
//!
//! The frozen numbers below were produced outside this crate with
//! complex-step differentiation of the energy expressions (step 1e-30), so
//! they are exact to roundoff and independent of the jet implementation.

use gradhom::material::{von_mises, FiberReinforced, Material, MooneyRivlin};
use gradhom::tensor::TensorN;
use gradhom::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Standard test deformation gradient.
fn f_bench() -> Tensor {
    Tensor::from_arr2(&[
        [0.897, 0.500, -0.400],
        [-0.070, 1.001, -0.100],
        [0.082, 0.020, 0.997],
    ])
}

/// Standard test second gradient (symmetric in the trailing pair), 1/mm.
fn g_bench() -> Tensor {
    Tensor::from_arr3(&[
        [
            [-0.033, 0.015, -0.020],
            [0.015, 0.013, 0.043],
            [-0.020, 0.043, 0.029],
        ],
        [
            [0.015, -0.005, 0.024],
            [-0.005, 0.028, 0.028],
            [0.024, 0.028, 0.014],
        ],
        [
            [0.023, 0.005, -0.031],
            [0.005, -0.042, -0.001],
            [-0.031, -0.001, -0.012],
        ],
    ])
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

#[test]
fn mooney_rivlin_energy_and_von_mises_reference() {
    let mat = Material::MooneyRivlin(MooneyRivlin::benchmark());
    let f = f_bench();
    let g = TensorN::zeros(3).unwrap();
    let psi = mat.energy(&f, &g).unwrap();
    assert!(rel(psi, 917.7906809506917) < 1e-13, "psi = {psi}");
    assert!(rel(f.det2().unwrap(), 0.9611851089999998) < 1e-14);

    let r = mat.stress(&f, &g).unwrap();
    let vm = von_mises(&r.p, &f).unwrap();
    assert!(rel(vm, 6132.725158303247) < 1e-12, "von Mises = {vm}");
    assert!(r.pp.norm() == 0.0);
}

#[test]
fn fiber_reference_state_values() {
    let m = FiberReinforced::benchmark();
    assert!(rel(m.beta(), 1.6296538327419778) < 1e-15);

    let mat = Material::Fiber(m);
    let (f, g) = (f_bench(), g_bench());
    let psi = mat.energy(&f, &g).unwrap();
    assert!(rel(psi, 529.2751942367969) < 1e-13, "psi = {psi}");

    let r = mat.stress(&f, &g).unwrap();
    let p_ref = Tensor::from_arr2(&[
        [-73.95711638556593, 1741.3435859687052, -761.2701058762517],
        [1705.9022486351462, 383.66634693915574, -255.90491306646086],
        [-897.168930306418, -215.7709482501554, -456.055349202053],
    ]);
    let pp_ref = Tensor::from_arr3(&[
        [
            [0.00630679172797163, 0.00630679172797163, 0.00889347041759306],
            [0.00630679172797163, 0.00630679172797163, 0.00889347041759306],
            [0.00889347041759306, 0.00889347041759306, 0.01419028138793617],
        ],
        [
            [0.0054033205868326, 0.0054033205868326, 0.00886253296312843],
            [0.0054033205868326, 0.0054033205868326, 0.00886253296312843],
            [0.00886253296312843, 0.00886253296312843, 0.01215747132037334],
        ],
        [
            [-0.00574248895762882, -0.00574248895762882, -0.00883821882977865],
            [-0.00574248895762882, -0.00574248895762882, -0.00883821882977865],
            [-0.00883821882977865, -0.00883821882977865, -0.01292060015466484],
        ],
    ]);
    assert!(r.p.sub(&p_ref).unwrap().norm() / p_ref.norm() < 1e-12);
    assert!(r.pp.sub(&pp_ref).unwrap().norm() / pp_ref.norm() < 1e-11);
    assert!(rel(r.p.norm(), 2792.762907751862) < 1e-12);
    assert!(rel(r.pp.norm(), 0.043207759448950465) < 1e-11);
}

#[test]
fn first_gradient_scaling_leaves_hyperstress() {
    let m = FiberReinforced::benchmark();
    let (f, g) = (f_bench(), g_bench());
    let base = Material::Fiber(m).stress(&f, &g).unwrap();
    let scaled = Material::Fiber(m.with_first_gradient_scaling(1e-8))
        .stress(&f, &g)
        .unwrap();
    // The curvature term is untouched, so the hyperstress is identical.
    assert!(scaled.pp.sub(&base.pp).unwrap().norm() < 1e-18);
    assert!(rel(scaled.p.norm(), 0.0065916356307564325) < 1e-10);
}

#[test]
fn stress_matches_energy_finite_differences() {
    let cases = [
        Material::MooneyRivlin(MooneyRivlin::benchmark()),
        Material::Fiber(FiberReinforced::benchmark()),
    ];
    let (f0, g0) = (f_bench(), g_bench());
    let h = 1e-6;
    for mat in cases {
        let r = mat.stress(&f0, &g0).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut fp = f0.clone();
                let mut fm = f0.clone();
                fp.set(&[i, j], f0.get(&[i, j]) + h);
                fm.set(&[i, j], f0.get(&[i, j]) - h);
                let fd = (mat.energy(&fp, &g0).unwrap() - mat.energy(&fm, &g0).unwrap())
                    / (2.0 * h);
                let p = r.p.get(&[i, j]);
                assert!(
                    (p - fd).abs() < 5e-4 * (1.0 + fd.abs()),
                    "dPsi/dF[{i}{j}] {p} vs {fd}"
                );
            }
        }
        // The energy is ~5e2 while dΨ/dG is ~1e-2, so the subtraction
        // cancels ~18 digits at h = 1e-6; a wider step keeps roundoff below
        // the truncation error.
        let hg = 1e-3;
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let mut gp = g0.clone();
                    let mut gm = g0.clone();
                    gp.set(&[i, j, k], g0.get(&[i, j, k]) + hg);
                    gm.set(&[i, j, k], g0.get(&[i, j, k]) - hg);
                    let fd = (mat.energy(&f0, &gp).unwrap()
                        - mat.energy(&f0, &gm).unwrap())
                        / (2.0 * hg);
                    let pp = r.pp.get(&[i, j, k]);
                    assert!(
                        (pp - fd).abs() < 1e-7 + 1e-4 * fd.abs(),
                        "dPsi/dG[{i}{j}{k}] {pp} vs {fd}"
                    );
                }
            }
        }
    }
}

#[test]
fn tangent_matches_stress_finite_differences() {
    let mat = Material::Fiber(FiberReinforced::benchmark());
    let (f0, g0) = (f_bench(), g_bench());
    let t = mat.tangent(&f0, &g0).unwrap();
    let h = 1e-6;
    // Columns in F: compare against dP/dF and dPP/dF.
    for s in 0..3 {
        for tt in 0..3 {
            let mut fp = f0.clone();
            let mut fm = f0.clone();
            fp.set(&[s, tt], f0.get(&[s, tt]) + h);
            fm.set(&[s, tt], f0.get(&[s, tt]) - h);
            let rp = mat.stress(&fp, &g0).unwrap();
            let rm = mat.stress(&fm, &g0).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let fd = (rp.p.get(&[i, j]) - rm.p.get(&[i, j])) / (2.0 * h);
                    let cc = t.cc.get(&[i, j, s, tt]);
                    assert!(
                        (cc - fd).abs() < 5e-3 * (1.0 + fd.abs()),
                        "cc[{i}{j}{s}{tt}] {cc} vs {fd}"
                    );
                    for k in 0..3 {
                        let fd2 =
                            (rp.pp.get(&[i, j, k]) - rm.pp.get(&[i, j, k])) / (2.0 * h);
                        let ee = t.ee.get(&[i, j, k, s, tt]);
                        assert!(
                            (ee - fd2).abs() < 1e-6 + 1e-4 * fd2.abs(),
                            "ee[{i}{j}{k}{s}{tt}] {ee} vs {fd2}"
                        );
                    }
                }
            }
        }
    }
    // A sample of G columns for dP/dG and dPP/dG.
    for flat in [0usize, 5, 13, 22, 26] {
        let (s, rest) = (flat / 9, flat % 9);
        let (tt, u) = (rest / 3, rest % 3);
        let mut gp = g0.clone();
        let mut gm = g0.clone();
        gp.set(&[s, tt, u], g0.get(&[s, tt, u]) + h);
        gm.set(&[s, tt, u], g0.get(&[s, tt, u]) - h);
        let rp = mat.stress(&f0, &gp).unwrap();
        let rm = mat.stress(&f0, &gm).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let fd = (rp.p.get(&[i, j]) - rm.p.get(&[i, j])) / (2.0 * h);
                let dd = t.dd.get(&[i, j, s, tt, u]);
                assert!(
                    (dd - fd).abs() < 1e-4 * (1.0 + fd.abs()),
                    "dd[{i}{j}{s}{tt}{u}] {dd} vs {fd}"
                );
                for k in 0..3 {
                    let fd2 = (rp.pp.get(&[i, j, k]) - rm.pp.get(&[i, j, k])) / (2.0 * h);
                    let gg = t.gg.get(&[i, j, k, s, tt, u]);
                    assert!(
                        (gg - fd2).abs() < 1e-6 + 1e-4 * fd2.abs(),
                        "gg[{i}{j}{k}{s}{tt}{u}] {gg} vs {fd2}"
                    );
                }
            }
        }
    }
}

#[test]
fn tangent_blocks_have_potential_symmetries() {
    let mat = Material::Fiber(FiberReinforced::benchmark());
    let t = mat.tangent(&f_bench(), &g_bench()).unwrap();
    // Major symmetry of the F-F block.
    for i in 0..3 {
        for j in 0..3 {
            for s in 0..3 {
                for tt in 0..3 {
                    let a = t.cc.get(&[i, j, s, tt]);
                    let b = t.cc.get(&[s, tt, i, j]);
                    assert!((a - b).abs() < 1e-20 * a.abs().max(1.0) + 0.0, "{a} {b}");
                }
            }
        }
    }
    // Cross blocks are transposes of one another.
    for i in 0..3 {
        for j in 0..3 {
            for s in 0..3 {
                for tt in 0..3 {
                    for u in 0..3 {
                        let a = t.dd.get(&[i, j, s, tt, u]);
                        let b = t.ee.get(&[s, tt, u, i, j]);
                        assert_eq!(a, b);
                    }
                }
            }
        }
    }
    // Hyperstress-side blocks inherit the trailing-pair symmetry of G
    // contractions in the energy.
    for i in 0..3 {
        for j in 0..3 {
            for s in 0..3 {
                for tt in 0..3 {
                    for u in 0..3 {
                        let a = t.dd.get(&[i, j, s, tt, u]);
                        let b = t.dd.get(&[i, j, s, u, tt]);
                        assert!((a - b).abs() < 1e-12 * (1.0 + a.abs()));
                    }
                }
            }
        }
    }
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // Rodrigues formula on a random axis and angle.
    let axis = {
        let v: [f64; 3] = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
    let (s, c) = angle.sin_cos();
    let k = [
        [0.0, -axis[2], axis[1]],
        [axis[2], 0.0, -axis[0]],
        [-axis[1], axis[0], 0.0],
    ];
    let mut q = [[0.0; 3]; 3];
    for i in 0..3 {
        q[i][i] = 1.0;
        for j in 0..3 {
            q[i][j] += s * k[i][j];
            let mut kk = 0.0;
            for m in 0..3 {
                kk += k[i][m] * k[m][j];
            }
            q[i][j] += (1.0 - c) * kk;
        }
    }
    q
}

#[test]
fn energy_is_frame_indifferent() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let cases = [
        Material::MooneyRivlin(MooneyRivlin::benchmark()),
        Material::Fiber(FiberReinforced::benchmark()),
    ];
    let (f0, g0) = (f_bench(), g_bench());
    for mat in &cases {
        let psi0 = mat.energy(&f0, &g0).unwrap();
        for _ in 0..10 {
            let q = random_rotation(&mut rng);
            // F -> Q F, G -> Q G (rotation acts on the spatial leg only).
            let mut fq = TensorN::zeros(2).unwrap();
            let mut gq = TensorN::zeros(3).unwrap();
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for m in 0..3 {
                        s += q[i][m] * f0.get(&[m, j]);
                    }
                    fq.set(&[i, j], s);
                    for k in 0..3 {
                        let mut sg = 0.0;
                        for m in 0..3 {
                            sg += q[i][m] * g0.get(&[m, j, k]);
                        }
                        gq.set(&[i, j, k], sg);
                    }
                }
            }
            let psi = mat.energy(&fq, &gq).unwrap();
            assert!(rel(psi, psi0) < 1e-12, "rotated energy {psi} vs {psi0}");
        }
    }
}

#[test]
fn tan_singularity_is_reported() {
    // Orthogonal reference fibers sheared onto a common line: the crossing
    // angle change reaches -π/2 where tan²θ blows up, which must surface as
    // an error instead of a garbage energy.
    let m = FiberReinforced {
        l1: [1.0, 0.0, 0.0],
        l2: [0.0, 1.0, 0.0],
        ..FiberReinforced::benchmark()
    };
    assert!((m.beta() - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    let mat = Material::Fiber(m);
    let f = Tensor::from_arr2(&[[1.0, 1.0, 0.0], [0.0, 1e-9, 0.0], [0.0, 0.0, 1.0]]);
    let g = TensorN::zeros(3).unwrap();
    match mat.energy(&f, &g) {
        Err(gradhom::material::MaterialError::TanSingular(t)) => {
            assert!((t.abs() - std::f64::consts::FRAC_PI_2).abs() < 1e-6)
        }
        other => panic!("expected tan singularity, got {other:?}"),
    }
}
