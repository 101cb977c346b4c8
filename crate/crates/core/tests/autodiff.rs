use fedmae::mae::{self, Image, MaeArchitecture};
use fedmae::tensor::{finite_difference_check, Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_layer_loss(w: &[f64], x: &Tensor, y: &Tensor) -> fedmae::tensor::Result<(f64, Vec<f64>)> {
    // x [3,3] -> W1 [3,4] + b1 [4] -> gelu -> W2 [4,1] ... 12+4+4 = 20 params
    let mut g = Graph::new(20);
    let xi = g.input(x.clone())?;
    let w1 = g.param(w, 0, vec![3, 4])?;
    let b1 = g.param(w, 12, vec![4])?;
    let w2 = g.param(w, 16, vec![4, 1])?;
    let h = g.matmul(xi, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.gelu(h)?;
    let o = g.matmul(h, w2)?;
    let t = g.input(y.clone())?;
    let d = g.sub(o, t)?;
    let sq = g.mul(d, d)?;
    let l = g.mean(sq)?;
    Ok((g.value(l).data()[0], g.backward_scalar(l)?))
}

#[test]
fn two_layer_network_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let w: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x = Tensor::matrix(3, 3, (0..9).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let y = Tensor::matrix(3, 1, vec![0.5, -0.2, 0.1]).unwrap();
    let err = finite_difference_check(|p| two_layer_loss(p, &x, &y), &w, 1e-5, None).unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

fn every_primitive(w: &[f64]) -> fedmae::tensor::Result<(f64, Vec<f64>)> {
    // exercises layer_norm, softmax, transpose, reshape, slicing, concat, gather
    let mut g = Graph::new(w.len());
    let a = g.param(w, 0, vec![3, 4])?;
    let gain = g.param(w, 12, vec![4])?;
    let n = g.layer_norm(a)?;
    let n = g.mul_row(n, gain)?;
    let s = g.softmax(n)?;
    let t = g.transpose(s)?;
    let r = g.reshape(t, vec![3, 4])?;
    let left = g.slice_cols(r, 0, 2)?;
    let right = g.slice_cols(r, 2, 2)?;
    let c = g.concat_cols(&[right, left])?;
    let top = g.slice_rows(c, 0, 1)?;
    let all = g.concat_rows(&[c, top])?;
    let picked = g.gather_rows(all, &[3, 0, 0, 2])?;
    let m = g.mul(picked, picked)?;
    let sc = g.scale(m, 3.0)?;
    let l = g.mean(sc)?;
    Ok((g.value(l).data()[0], g.backward_scalar(l)?))
}

#[test]
fn primitive_set_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
    let err = finite_difference_check(every_primitive, &w, 1e-5, None).unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

fn micro_setup() -> (MaeArchitecture, Vec<Image>, Vec<mae::MaskSet>) {
    let arch = MaeArchitecture::micro();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let imgs: Vec<Image> = (0..2)
        .map(|_| Image::new(4, 1, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap())
        .collect();
    let masks = (0..2)
        .map(|i| mae::sample_mask(4, 0.75, i).unwrap())
        .collect();
    (arch, imgs, masks)
}

#[test]
fn micro_mae_matches_central_differences() {
    let (arch, imgs, masks) = micro_setup();
    let w = mae::init_params(&arch, 5);
    let ir: Vec<&Image> = imgs.iter().collect();
    let mr: Vec<&mae::MaskSet> = masks.iter().collect();
    let f = |p: &[f64]| {
        mae::loss_and_grad(p, &arch, &ir, &mr).map_err(|e| match e {
            mae::MaeError::Tensor(t) => t,
            other => panic!("{other}"),
        })
    };
    let err = finite_difference_check(f, &w, 1e-5, None).unwrap();
    assert!(err < 1e-5, "max relative error {err}");
}

#[test]
fn gradient_is_linear_in_the_loss() {
    // grad(a*L1 + b*L2) == a*grad(L1) + b*grad(L2)
    let (arch, imgs, masks) = micro_setup();
    let w = mae::init_params(&arch, 9);
    let (_, g1) = mae::loss_and_grad(&w, &arch, &[&imgs[0]], &[&masks[0]]).unwrap();
    let (_, g2) = mae::loss_and_grad(&w, &arch, &[&imgs[1]], &[&masks[1]]).unwrap();
    // batch loss is the mean, i.e. a = b = 0.5
    let (_, gb) =
        mae::loss_and_grad(&w, &arch, &[&imgs[0], &imgs[1]], &[&masks[0], &masks[1]]).unwrap();
    for i in 0..w.len() {
        assert!((gb[i] - 0.5 * g1[i] - 0.5 * g2[i]).abs() < 1e-10);
    }
}

#[test]
fn forward_and_backward_are_deterministic() {
    let (arch, imgs, masks) = micro_setup();
    let w = mae::init_params(&arch, 9);
    let a = mae::loss_and_grad(&w, &arch, &[&imgs[0]], &[&masks[0]]).unwrap();
    let b = mae::loss_and_grad(&w, &arch, &[&imgs[0]], &[&masks[0]]).unwrap();
    assert_eq!(a.0.to_bits(), b.0.to_bits());
    assert!(a
        .1
        .iter()
        .zip(&b.1)
        .all(|(x, y)| x.to_bits() == y.to_bits()));
}

// Direct (tape-free) evaluation of a depth-0 autoencoder:
// embed -> norm -> decoder embed -> mask-token fill + positions -> norm -> head.
#[test]
fn depth_zero_model_matches_hand_forward() {
    let arch = MaeArchitecture {
        encoder_depth: 0,
        decoder_depth: 0,
        mask_ratio: 0.25,
        ..MaeArchitecture::micro()
    };
    let w = mae::init_params(&arch, 17);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w: Vec<f64> = w.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
    let img = Image::new(4, 1, (0..16).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    let mask = mae::sample_mask(4, 0.25, 2).unwrap();
    assert_eq!(mask.masked.len(), 1);
    let (loss, report) = mae::forward_mae(&w, &arch, &img, &mask).unwrap();

    let d = 4;
    let mut at = 0;
    let mut take = |n: usize| {
        let s = w[at..at + n].to_vec();
        at += n;
        s
    };
    let (we, be) = (take(16), take(4));
    let (ge, bne) = (take(4), take(4));
    let (wd, bd) = (take(16), take(4));
    let tok = take(4);
    let (gd, bnd) = (take(4), take(4));
    let (wh, bh) = (take(16), take(4));
    let lin = |x: &[f64], w: &[f64], b: &[f64]| -> Vec<f64> {
        (0..b.len())
            .map(|o| b[o] + (0..x.len()).map(|i| x[i] * w[i * b.len() + o]).sum::<f64>())
            .collect()
    };
    let norm = |x: &[f64], g: &[f64], b: &[f64]| -> Vec<f64> {
        let m = x.iter().sum::<f64>() / x.len() as f64;
        let v = x.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / x.len() as f64;
        x.iter()
            .enumerate()
            .map(|(i, a)| (a - m) / (v + 1e-5).sqrt() * g[i] + b[i])
            .collect()
    };
    let pos_e = mae::sincos_positions(2, d);
    let patches = mae::patchify(&img, 2).unwrap();
    let mut total = 0.0;
    let mut mse = [0.0; 4];
    for p in 0..4 {
        let dec_in: Vec<f64> = if mask.masked.contains(&p) {
            tok.clone()
        } else {
            let mut e = lin(&patches[p], &we, &be);
            for j in 0..d {
                e[j] += pos_e[p * d + j];
            }
            lin(&norm(&e, &ge, &bne), &wd, &bd)
        };
        let mut y = dec_in;
        for j in 0..d {
            y[j] += pos_e[p * d + j];
        }
        let pred = lin(&norm(&y, &gd, &bnd), &wh, &bh);
        mse[p] = pred
            .iter()
            .zip(&patches[p])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / 4.0;
        if mask.masked.contains(&p) {
            total += mse[p];
        }
    }
    assert!((loss - total).abs() < 1e-10, "{loss} vs {total}");
    for p in 0..4 {
        assert!((report.per_patch_mse[p] - mse[p]).abs() < 1e-10);
    }
}

fn attention_loss(w: &[f64]) -> fedmae::tensor::Result<(f64, Vec<f64>)> {
    // batch 2, seq 3, d 4, two heads
    let mut g = Graph::new(w.len());
    let q = g.param(w, 0, vec![6, 4])?;
    let k = g.param(w, 24, vec![6, 4])?;
    let v = g.param(w, 48, vec![6, 4])?;
    let o = g.attention(q, k, v, 2, 3, 2)?;
    let sq = g.mul(o, o)?;
    let l = g.mean(sq)?;
    Ok((g.value(l).data()[0], g.backward_scalar(l)?))
}

#[test]
fn attention_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
    let err = finite_difference_check(attention_loss, &w, 1e-5, None).unwrap();
    assert!(err < 1e-6, "max relative error {err}");
}

#[test]
fn attention_matches_per_head_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let w: Vec<f64> = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut g = Graph::new(72);
    let q = g.param(&w, 0, vec![6, 4]).unwrap();
    let k = g.param(&w, 24, vec![6, 4]).unwrap();
    let v = g.param(&w, 48, vec![6, 4]).unwrap();
    let fused = g.attention(q, k, v, 2, 3, 2).unwrap();
    let fused = g.value(fused).data().to_vec();
    let scale = 1.0 / 2f64.sqrt();
    for b in 0..2 {
        for h in 0..2 {
            let at = |m: usize, i: usize, c: usize| w[m * 24 + (b * 3 + i) * 4 + h * 2 + c];
            for i in 0..3 {
                let s: Vec<f64> = (0..3)
                    .map(|j| (0..2).map(|c| at(0, i, c) * at(1, j, c)).sum::<f64>() * scale)
                    .collect();
                let z: f64 = s.iter().map(|x| x.exp()).sum();
                for c in 0..2 {
                    let want: f64 = (0..3).map(|j| s[j].exp() / z * at(2, j, c)).sum();
                    let got = fused[(b * 3 + i) * 4 + h * 2 + c];
                    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
                }
            }
        }
    }
}
