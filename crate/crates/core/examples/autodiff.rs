//! Build a small expression on the tape, take its gradient and compare it
//! with central differences.

use metatransfer::tensor::{finite_diff_grad, Bound, ParamStore, Tape, Tensor, Var};

fn build(tape: &mut Tape, b: &Bound) -> Var {
    let w = b.get("w").unwrap();
    let x = tape.constant_vec(vec![0.3, -1.2, 0.8]);
    let h = tape.matvec(w, x).unwrap();
    let a = tape.tanh(h);
    let c = tape.sigmoid(h);
    let m = tape.stack(&[a, c]).unwrap();
    let s = tape.softmax_rows(m).unwrap();
    let s = tape.mul(s, m).unwrap();
    let r = tape.sum_rows(s).unwrap();
    let v = b.get("v").unwrap();
    tape.dot(r, v).unwrap()
}

fn value(p: &ParamStore) -> f64 {
    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let out = build(&mut tape, &b);
    tape.item(out)
}

fn main() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::matrix(2, 3, vec![0.5, -0.1, 0.7, 1.1, 0.2, -0.4]).unwrap());
    p.insert("v", Tensor::vector(vec![2.0, -3.0]));

    let mut tape = Tape::new();
    let b = p.bind(&mut tape);
    let out = build(&mut tape, &b);
    let grad = tape.backward(out).unwrap();
    let fd = finite_diff_grad(value, &p, 1e-6);

    println!("value {:.6}", tape.item(out));
    for (name, g) in grad.iter() {
        let want = fd.get(name).unwrap();
        let err = g.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        println!("d/d{name} = {:?}  (max diff vs finite differences {err:.2e})", g.data());
        assert!(err < 1e-7);
    }
}
