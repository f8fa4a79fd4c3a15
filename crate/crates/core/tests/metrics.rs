use voxelbridge::eval::{bleu, pixcorr, rouge_l, ssim_gray, tokenize, two_way_per_item};
use voxelbridge::image::RgbImage;

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn wave(n: usize, phase: f64) -> Vec<f64> {
    (0..n).map(|i| 0.5 + 0.4 * ((i as f64) * 0.37 + phase).sin()).collect()
}

#[test]
fn two_way_matches_double_loop() {
    let truth: Vec<Vec<f64>> = (0..10).map(|i| wave(12, i as f64)).collect();
    let recon: Vec<Vec<f64>> = (0..10).map(|i| wave(12, i as f64 * 1.7 + 0.3)).collect();
    let got = two_way_per_item(&truth, &recon).unwrap();
    for i in 0..10 {
        let own = pearson(&truth[i], &recon[i]);
        let mut wins = 0.0;
        for j in (0..10).filter(|j| *j != i) {
            let other = pearson(&truth[i], &recon[j]);
            wins += if own > other { 1.0 } else if own == other { 0.5 } else { 0.0 };
        }
        assert_eq!(got[i], 100.0 * wins / 9.0);
    }
}

#[test]
fn pixcorr_is_pearson_over_channels() {
    let a = RgbImage::new(4, 4, wave(48, 0.0).iter().map(|v| *v as f32).collect()).unwrap();
    let b = RgbImage::new(4, 4, wave(48, 1.1).iter().map(|v| *v as f32).collect()).unwrap();
    let x: Vec<f64> = a.data.iter().map(|v| *v as f64).collect();
    let y: Vec<f64> = b.data.iter().map(|v| *v as f64).collect();
    let pc = pixcorr(&a, &b, 4).unwrap();
    assert!((pc.value - pearson(&x, &y)).abs() < 1e-10);
    let flat = RgbImage::filled(4, 4, [0.3; 3]);
    let pc = pixcorr(&flat, &b, 4).unwrap();
    assert!(pc.degenerate);
    assert_eq!(pc.value, 0.0);
}

/// Mean SSIM over every fully contained 11×11 window, Gaussian σ = 1.5.
fn ssim_oracle(x: &[f64], y: &[f64], w: usize, h: usize) -> f64 {
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum::<f64>().powi(2);
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - 11 {
        for ox in 0..=w - 11 {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for j in 0..11 {
                for i in 0..11 {
                    let k = g[i] * g[j] / norm;
                    let (a, b) = (x[(oy + j) * w + ox + i], y[(oy + j) * w + ox + i]);
                    mx += k * a;
                    my += k * b;
                    sxx += k * a * a;
                    syy += k * b * b;
                    sxy += k * a * b;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += (2.0 * mx * my + c1) * (2.0 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_windowed_oracle() {
    let (w, h) = (17, 14);
    let x = wave(w * h, 0.0);
    let y: Vec<f64> = wave(w * h, 0.8).iter().zip(&x).map(|(a, b)| 0.6 * a + 0.4 * b).collect();
    let got = ssim_gray(&x, &y, w, h).unwrap();
    assert!((got - ssim_oracle(&x, &y, w, h)).abs() < 1e-6);
    assert!((ssim_gray(&x, &x, w, h).unwrap() - 1.0).abs() < 1e-12);
    assert!(ssim_gray(&x[..100], &y[..100], 10, 10).is_err());
}

#[test]
fn bleu_hand_cases() {
    let b = bleu("the cat sat on the mat", &["the cat sat on the mat"], 4);
    assert!(b.iter().all(|v| (v - 1.0).abs() < 1e-12), "{b:?}");
    // Clipped unigram precision 1/4, candidate longer than reference.
    assert!((bleu("the the the the", &["the cat"], 1)[0] - 0.25).abs() < 1e-12);
    // p1 = 3/4, p2 = 1/3, equal lengths.
    let b2 = bleu("a b a c", &["a b x c"], 2)[1];
    assert!((b2 - (0.75f64 * (1.0 / 3.0)).sqrt()).abs() < 1e-12);
    // Short candidate: brevity penalty exp(1 - 6/3).
    let b1 = bleu("the cat sat", &["the cat sat on the mat"], 1)[0];
    assert!((b1 - (-1.0f64).exp()).abs() < 1e-12);
    assert_eq!(bleu("", &["x"], 2), vec![0.0, 0.0]);
}

#[test]
fn rouge_l_hand_cases() {
    // LCS 3, precision 3/4, recall 1, beta 1.2.
    let (p, r, b2) = (0.75, 1.0, 1.44);
    let want = (1.0 + b2) * p * r / (r + b2 * p);
    assert!((rouge_l("a b c d", "a c d") - want).abs() < 1e-12);
    assert_eq!(rouge_l("a b", "c d"), 0.0);
    assert!((rouge_l("Same words.", "same WORDS") - 1.0).abs() < 1e-12);
}

#[test]
fn tokenizer_drops_punctuation_and_case() {
    assert_eq!(tokenize("Hello, World!  again"), ["hello", "world", "again"]);
}
