use pyo3::prelude::*;

#[pymodule]
fn parafac2_py(_m: &Bound<'_, PyModule>) -> PyResult<()> {
    Ok(())
}
