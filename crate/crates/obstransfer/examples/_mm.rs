use std::time::Instant;
fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * m..(i + 1) * m];
        for (kk, aik) in arow.iter().enumerate() {
            if *aik == 0.0 { continue; }
            let brow = &b[kk * m..(kk + 1) * m];
            for (o, bb) in orow.iter_mut().zip(brow) { *o += aik * bb; }
        }
    }
    out
}
fn main() {
    // typical conv im2col shape for 16x16 pixel encoder, batch 64
    for (n,k,m) in [(64*144usize,144usize,32usize),(64*196,27,16),(64*100,288,32)] {
        let a: Vec<f64> = (0..n*k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k*m).map(|i| (i as f64).cos()).collect();
        let t0 = Instant::now(); let mut s=0.0;
        for _ in 0..10 { s += matmul(&a,&b,n,k,m)[0]; }
        let hand = t0.elapsed().as_secs_f64()/10.0;
        let na = nalgebra::DMatrix::from_row_slice(n,k,&a);
        let nb = nalgebra::DMatrix::from_row_slice(k,m,&b);
        let t0 = Instant::now();
        for _ in 0..10 { s += (&na*&nb)[(0,0)]; }
        let nal = t0.elapsed().as_secs_f64()/10.0;
        println!("{n}x{k}x{m}: hand {:.2}ms nalgebra {:.2}ms speedup {:.1}x ({s:.1})", hand*1e3, nal*1e3, hand/nal);
    }
}
