//! Dice and ASD against brute-force implementations written independently of the library.

use btol_core::eval::{asd, dice};
use btol_core::netcore::SplitMix64;
use btol_core::LabelTensor;

mod support;

use support::{brute_asd, brute_dice};

fn check(p: &[u8], g: &[u8], h: usize, w: usize, classes: u8) {
    let pt = LabelTensor::new(vec![h, w], p.to_vec()).unwrap();
    let gt = LabelTensor::new(vec![h, w], g.to_vec()).unwrap();
    for c in 0..classes {
        assert_eq!(dice(&pt, &gt, c).unwrap(), brute_dice(p, g, c), "dice {h}x{w} c{c} {p:?} {g:?}");
        assert_eq!(asd(&pt, &gt, c).unwrap(), brute_asd(p, g, h, w, c), "asd {h}x{w} c{c} {p:?} {g:?}");
        assert_eq!(dice(&pt, &gt, c).unwrap().to_bits(), dice(&gt, &pt, c).unwrap().to_bits());
        assert_eq!(asd(&pt, &gt, c).unwrap().map(f64::to_bits), asd(&gt, &pt, c).unwrap().map(f64::to_bits));
    }
}

fn bits(v: u32, n: usize) -> Vec<u8> {
    (0..n).map(|i| ((v >> i) & 1) as u8).collect()
}

#[test]
fn every_pair_of_binary_masks_on_small_grids() {
    for (h, w) in [(1, 1), (1, 4), (2, 2), (2, 4), (4, 2), (3, 3)] {
        let n = h * w;
        let masks: Vec<Vec<u8>> = (0..1u32 << n).map(|v| bits(v, n)).collect();
        for p in &masks {
            for g in &masks {
                check(p, g, h, w, 2);
            }
        }
    }
}

#[test]
fn every_ternary_mask_pair_on_2x2() {
    let masks: Vec<Vec<u8>> = (0..81u32).map(|mut v| (0..4).map(|_| { let d = (v % 3) as u8; v /= 3; d }).collect()).collect();
    for p in &masks {
        for g in &masks {
            check(p, g, 2, 2, 3);
        }
    }
}

#[test]
fn random_masks_of_every_size_up_to_16() {
    let mut rng = SplitMix64::new(99);
    for h in 1..=16 {
        for w in 1..=16 {
            for trial in 0..6 {
                // Sparse, dense and blob-like masks.
                let density = [0.05, 0.5, 0.9][trial % 3];
                let (p, g): (Vec<u8>, Vec<u8>) = if trial >= 3 {
                    let blob = |rng: &mut SplitMix64| {
                        let (cy, cx) = (rng.uniform(0.0, h as f64), rng.uniform(0.0, w as f64));
                        let r = rng.uniform(0.5, 6.0);
                        (0..h * w)
                            .map(|i| {
                                let (y, x) = ((i / w) as f64, (i % w) as f64);
                                let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                                if d < r * 0.5 { 2 } else if d < r { 1 } else { 0 }
                            })
                            .collect()
                    };
                    (blob(&mut rng), blob(&mut rng))
                } else {
                    let mut draw = || (0..h * w).map(|_| u8::from(rng.next_f64() < density) + u8::from(rng.next_f64() < 0.3)).collect::<Vec<u8>>();
                    (draw(), draw())
                };
                check(&p, &g, h, w, 3);
            }
        }
    }
}

#[test]
fn square_shifted_by_one_matches_brute_force() {
    let (h, w) = (8, 8);
    let sq = |x0: usize| -> Vec<u8> { (0..h * w).map(|i| u8::from((2..6).contains(&(i / w)) && (x0..x0 + 4).contains(&(i % w)))).collect() };
    let (p, g) = (sq(1), sq(2));
    check(&p, &g, h, w, 2);
    let got = asd(&LabelTensor::new(vec![h, w], p).unwrap(), &LabelTensor::new(vec![h, w], g).unwrap(), 1).unwrap().unwrap();
    assert!(got > 0.0 && got < 1.0);
}
