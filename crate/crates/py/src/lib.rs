//! Python bindings for cfuseg.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyDict};

use cfuseg::checkpoint::{load_model, save_weights};
use cfuseg::dishgen::{self, GeneratorParams, Preset};
use cfuseg::evalkit::{self, ClassMetrics};
use cfuseg::gradcheck::unet_grad_check;
use cfuseg::loss::{Loss, LossKind};
use cfuseg::netpbm;
use cfuseg::tensor::Mode;
use cfuseg::unet::{predict_mask, UNetConfig};
use cfuseg::{Error, LabelMask, RgbImage};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn params(preset: &str, size: usize) -> PyResult<GeneratorParams> {
    let preset: Preset = preset.parse().map_err(PyValueError::new_err)?;
    Ok(GeneratorParams::for_preset(preset, size))
}

/// Training configuration; keys and values as in the `key=value` config files.
#[pyclass(name = "RunConfig", module = "cfuseg", skip_from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: cfuseg::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (text = None, overrides = Vec::new()))]
    fn new(text: Option<&str>, overrides: Vec<String>) -> PyResult<Self> {
        let inner = cfuseg::RunConfig::parse(text, &overrides).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn keys() -> Vec<&'static str> {
        cfuseg::config::KEYS.to_vec()
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown configuration key `{key}`")))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        let mut next = self.inner.clone();
        next.set(key, value).map_err(py_err)?;
        next.validate().map_err(py_err)?;
        self.inner = next;
        Ok(())
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({})", self.inner.to_text().trim_end().replace('\n', ", "))
    }
}

/// 8-bit RGB image, row-major `height * width * 3` bytes.
#[pyclass(name = "Image", module = "cfuseg", skip_from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: RgbImage,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: RgbImage::new(height, width, data).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: netpbm::read_ppm(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        netpbm::write_ppm(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        (self.inner.height(), self.inner.width(), 3)
    }

    fn tobytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.data())
    }

    /// Colony tints, border colour and numbered instance boxes drawn from `mask`.
    fn overlay(&self, mask: &PyMask) -> PyResult<Self> {
        let o = evalkit::render_overlay(&self.inner, &mask.inner).map_err(py_err)?;
        Ok(Self { inner: o.image })
    }
}

/// Label mask with values 0 background, 1 bvg+, 2 bvg-, 3 border.
#[pyclass(name = "Mask", module = "cfuseg", from_py_object)]
#[derive(Clone)]
struct PyMask {
    inner: LabelMask,
}

#[pymethods]
impl PyMask {
    #[new]
    fn new(height: usize, width: usize, labels: Vec<u8>) -> PyResult<Self> {
        Ok(Self {
            inner: LabelMask::new(height, width, labels).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: netpbm::read_pgm_mask(&path).map_err(py_err)?,
        })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        netpbm::write_pgm(&path, &self.inner).map_err(py_err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        (self.inner.height(), self.inner.width())
    }

    fn tobytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.inner.labels())
    }

    /// Pixel counts of background, bvg+, bvg-, border.
    fn histogram(&self) -> [usize; 4] {
        self.inner.histogram()
    }

    /// Connected-component colony counts `(bvg+, bvg-)`.
    fn count_colonies(&self) -> (usize, usize) {
        let c = evalkit::count_colonies(&self.inner);
        (c.bvg_plus, c.bvg_minus)
    }
}

/// U-Net segmentation model.
#[pyclass(name = "UNet", module = "cfuseg")]
struct PyUNet {
    inner: cfuseg::UNetModel,
}

#[pymethods]
impl PyUNet {
    #[new]
    #[pyo3(signature = (depth = 2, base_channels = 16, batchnorm = true, seed = 0))]
    fn new(depth: usize, base_channels: usize, batchnorm: bool, seed: u64) -> PyResult<Self> {
        let config = UNetConfig {
            depth,
            base_channels,
            batchnorm,
        };
        Ok(Self {
            inner: cfuseg::build_unet(config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_model(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_weights(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.config().depth
    }

    #[getter]
    fn base_channels(&self) -> usize {
        self.inner.config().base_channels
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Class probabilities for one image as a flat `4 * height * width` list.
    fn probabilities(&mut self, image: &PyImage) -> PyResult<Vec<f32>> {
        let probs = self.inner.forward(&image.inner.to_tensor(), Mode::Infer).map_err(py_err)?;
        Ok(probs.data().to_vec())
    }

    fn predict(&mut self, image: &PyImage) -> PyResult<PyMask> {
        let probs = self.inner.forward(&image.inner.to_tensor(), Mode::Infer).map_err(py_err)?;
        Ok(PyMask {
            inner: predict_mask(&probs).remove(0),
        })
    }
}

/// Samples and renders one synthetic dish; returns `(image, mask)`.
#[pyfunction]
#[pyo3(signature = (seed, size = 128, preset = "realistic"))]
fn render_dish(seed: u64, size: usize, preset: &str) -> PyResult<(PyImage, PyMask)> {
    let scene = dishgen::sample_scene(&params(preset, size)?, seed).map_err(py_err)?;
    Ok((
        PyImage {
            inner: dishgen::render_image(&scene),
        },
        PyMask {
            inner: dishgen::render_mask(&scene),
        },
    ))
}

/// Writes a dataset directory; returns the aggregate pixel fractions.
#[pyfunction]
#[pyo3(signature = (out_dir, n, seed = 0, size = 128, preset = "realistic"))]
fn generate_dataset(out_dir: PathBuf, n: usize, seed: u64, size: usize, preset: &str) -> PyResult<[f64; 4]> {
    let m = dishgen::generate_dataset(&params(preset, size)?, n, seed, &out_dir).map_err(py_err)?;
    Ok(m.pixel_fractions)
}

fn class_dict<'py>(py: Python<'py>, m: &ClassMetrics) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("mae", m.mae)?;
    d.set_item("precision", m.precision)?;
    d.set_item("recall", m.recall)?;
    Ok(d)
}

/// Metrics of predicted against ground-truth masks. Undefined rates are `None`.
#[pyfunction]
fn evaluate<'py>(py: Python<'py>, pred: Vec<PyMask>, gt: Vec<PyMask>) -> PyResult<Bound<'py, PyDict>> {
    let ids: Vec<String> = (0..gt.len()).map(|i| format!("{i:03}")).collect();
    let p: Vec<LabelMask> = pred.into_iter().map(|m| m.inner).collect();
    let g: Vec<LabelMask> = gt.into_iter().map(|m| m.inner).collect();
    let r = evalkit::evaluate_masks(&ids, &p, &g).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("map", r.map)?;
    d.set_item("bvg_plus", class_dict(py, &r.bvg_plus)?)?;
    d.set_item("bvg_minus", class_dict(py, &r.bvg_minus)?)?;
    d.set_item("border", class_dict(py, &r.border)?)?;
    Ok(d)
}

/// Finite-difference check of a small U-Net; returns the largest relative error.
#[pyfunction]
#[pyo3(signature = (seed = 0, loss = "weighted_ce", batchnorm = true))]
fn grad_check(seed: u64, loss: &str, batchnorm: bool) -> PyResult<f64> {
    let kind: LossKind = loss.parse().map_err(PyValueError::new_err)?;
    let config = UNetConfig {
        depth: 2,
        base_channels: 4,
        batchnorm,
    };
    let loss = Loss {
        kind,
        ..Loss::default()
    };
    let r = unet_grad_check(config, &loss, 8, 2, seed).map_err(py_err)?;
    Ok(r.max_relative_error)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    cfuseg::cli::run(std::iter::once("cfuseg".to_string()).chain(args))
}

#[pymodule]
#[pyo3(name = "cfuseg")]
fn cfuseg_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyMask>()?;
    m.add_class::<PyUNet>()?;
    m.add_function(wrap_pyfunction!(render_dish, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(grad_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
