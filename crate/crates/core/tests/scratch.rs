use caeav_core::nn::*;
use caeav_core::rng::Stream;
use caeav_core::tensor::*;

fn random_tensor(shape: Vec<usize>, stream: &mut Stream) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| stream.next_gaussian()).collect()).unwrap()
}

#[test]
fn diag_query_dependence() {
    let mut store = ParamStore::new();
    let mha = MultiHeadAttention::new(&mut store, "m", 6, 2, 5, false).unwrap();
    let mut s = Stream::new(1);
    let q = random_tensor(vec![1, 3, 6], &mut s);   // 3 distinct query tokens
    let kv = random_tensor(vec![1, 4, 6], &mut s);  // 4 kv tokens

    let mut tape = Tape::new();
    let qv = tape.input(&q);
    let kvv = tape.input(&kv);
    let out = mha.forward_cross(&mut tape, &store, qv, kvv).unwrap();
    let d = tape.data(out);
    println!("out tok0: {:?}", &d[..6]);
    println!("out tok1: {:?}", &d[6..12]);
    println!("out tok2: {:?}", &d[12..18]);

    // also 2D case (no batch dims)
    let q2 = random_tensor(vec![3, 6], &mut s);
    let kv2 = random_tensor(vec![4, 6], &mut s);
    let q2v = tape.input(&q2);
    let kv2v = tape.input(&kv2);
    let out2 = mha.forward_cross(&mut tape, &store, q2v, kv2v).unwrap();
    let d2 = tape.data(out2);
    println!("2d tok0: {:?}", &d2[..3]);
    println!("2d tok1: {:?}", &d2[6..9]);
}
