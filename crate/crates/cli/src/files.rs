//! Output-directory layout and file helpers shared by the stages.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use gststream::circuits::ExperimentDesign;
use gststream::gauge::{model_fogi_basis, FogiBasisFile};
use gststream::model::ModelConfig;
use gststream::{FogiBasis, GateSetModel};
use nalgebra::DVector;

use crate::error::{CliError, CliResult};

pub struct Layout {
    pub dir: PathBuf,
}

impl Layout {
    pub fn new(dir: &Path) -> CliResult<Self> {
        if !dir.is_dir() {
            return Err(CliError::validation(format!(
                "output directory {} does not exist",
                dir.display()
            )));
        }
        Ok(Self { dir: dir.to_path_buf() })
    }

    /// Like [`Layout::new`], creating the directory if needed.
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::validation(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn design(&self) -> PathBuf {
        self.path("design.jsonl")
    }

    pub fn model(&self) -> PathBuf {
        self.path("model.json")
    }

    pub fn fogi(&self) -> PathBuf {
        self.path("fogi.json")
    }

    pub fn observations(&self) -> PathBuf {
        self.path("observations.jsonl")
    }

    pub fn observations_csv(&self) -> PathBuf {
        self.path("observations.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.path("checkpoint.json")
    }

    pub fn updates(&self) -> PathBuf {
        self.path("updates.csv")
    }

    pub fn states(&self) -> PathBuf {
        self.path("states.jsonl")
    }

    pub fn mle_curve(&self) -> PathBuf {
        self.path("mle_curve.csv")
    }

    pub fn throughput(&self) -> PathBuf {
        self.path("throughput.csv")
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    path.with_file_name(name)
}

/// Writes through a sibling temporary file and renames it into place, so a
/// failed write never leaves a truncated output behind.
pub fn write_atomic<F>(path: &Path, body: F) -> CliResult<()>
where
    F: FnOnce(&mut BufWriter<File>) -> CliResult<()>,
{
    let tmp = tmp_path(path);
    let result = (|| {
        let mut w = BufWriter::new(File::create(&tmp)?);
        body(&mut w)?;
        w.flush()?;
        w.get_ref().sync_all()?;
        drop(w);
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn open(path: &Path) -> CliResult<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::validation(format!("cannot open {}: {e}", path.display())))
}

pub fn read_design(path: &Path) -> CliResult<ExperimentDesign> {
    let design = ExperimentDesign::read_jsonl(open(path)?)?;
    design.validate()?;
    Ok(design)
}

pub fn read_model(path: &Path) -> CliResult<(GateSetModel, DVector<f64>, ModelConfig)> {
    let config: ModelConfig =
        serde_json::from_reader(open(path)?).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    let (model, x) = GateSetModel::from_config(&config)?;
    Ok((model, x, config))
}

/// Loads the FOGI basis from `path`, or builds it when the file is absent.
pub fn load_fogi(path: &Path, model: &GateSetModel) -> CliResult<FogiBasis> {
    if !path.exists() {
        return Ok(model_fogi_basis(model)?);
    }
    let file: FogiBasisFile =
        serde_json::from_reader(open(path)?).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
    if file.param_labels != model.param_labels() {
        return Err(CliError::validation(format!(
            "{} was built for a different model",
            path.display()
        )));
    }
    Ok(FogiBasis::from_file(&file)?)
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
