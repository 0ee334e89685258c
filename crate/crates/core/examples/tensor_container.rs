//! Writes and reads named tensors in the GDTR1 container and shows its bytes.
//!
//!     cargo run --release --example tensor_container

use geodtr::tensor::Tensor;
use geodtr::tensor_io::{decode, encode, DType, Record};

fn main() -> geodtr::Result<()> {
    let records = vec![
        Record::f64("weights", Tensor { shape: vec![2, 3], data: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0] }),
        Record { name: "scale".into(), dtype: DType::F32, tensor: Tensor { shape: vec![], data: vec![0.5] } },
    ];
    let bytes = encode(&records)?;
    println!("{} bytes", bytes.len());
    for chunk in bytes.chunks(16).take(4) {
        let hex: Vec<String> = chunk.iter().map(|b| format!("{b:02x}")).collect();
        println!("  {}", hex.join(" "));
    }
    let back = decode(&bytes)?;
    assert_eq!(back, records);
    for r in &back {
        println!("{} {:?} {:?} {:?}", r.name, r.dtype, r.tensor.shape, r.tensor.data);
    }

    let mut bad = bytes.clone();
    bad[0] = b'X';
    println!("corrupted magic: {}", decode(&bad).unwrap_err());
    println!("truncated: {}", decode(&bytes[..bytes.len() - 3]).unwrap_err());
    let dup = vec![records[0].clone(), records[0].clone()];
    println!("duplicate names: {}", encode(&dup).unwrap_err());
    Ok(())
}
