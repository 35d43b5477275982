//! Tensor and bundle files: write, read back, and reject damaged copies.

use nbc::compensation::Storage;
use nbc::format::{decode_bundle, read_bundle, read_tensor, write_bundle, write_tensor, Dtype};
use nbc::{store_params, CompensationModule, Tensor, TransformKind};

fn main() -> nbc::Result<()> {
    let dir = tempfile::tempdir().map_err(|e| nbc::NbcError::Io {
        path: std::env::temp_dir(),
        source: e,
    })?;

    let t = Tensor::matrix(2, 3, vec![0.5, -1.25, 3.0, 0.0, 7.75, -2.0])?;
    let path = dir.path().join("t.nbct");
    write_tensor(&path, &t, Dtype::F32)?;
    let (back, dtype) = read_tensor(&path)?;
    println!("tensor {:?} as {dtype:?}: equal = {}", back.dims(), back == t);

    let w = Tensor::from_rows(&[[0.1, -0.2], [0.3, 0.05]])?;
    let m = CompensationModule::new(TransformKind::blt(2.0), w, Tensor::vector(vec![0.01, -0.02]))?;
    let modules = vec![
        store_params(&m, Storage::F16)?,
        store_params(&m, Storage::I8PerChannel)?,
    ];
    let path = dir.path().join("modules.nbcb");
    write_bundle(&path, &modules)?;
    let back = read_bundle(&path)?;
    println!("bundle with {} blocks: equal = {}", back.len(), back == modules);

    let mut bytes = std::fs::read(&path).map_err(|e| nbc::NbcError::Io {
        path: path.clone(),
        source: e,
    })?;
    bytes.truncate(bytes.len() - 4);
    match decode_bundle(&bytes) {
        Err(e) => println!("truncated copy rejected: {e}"),
        Ok(_) => println!("truncated copy accepted?"),
    }
    Ok(())
}
