//! Synthetic dataset generation with a provenance file.

use std::path::Path;

use ini::Ini;
use nails::data::{SplitData, SyntheticBinarySystem};

use crate::experiment::save_trace;
use crate::Failure;

#[derive(Debug, Clone, PartialEq)]
pub struct BinaryRequest {
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
    pub change_probability: f64,
}

impl BinaryRequest {
    fn system(&self) -> Result<SyntheticBinarySystem, Failure> {
        let sys = SyntheticBinarySystem {
            noise_std: self.sigma,
            change_probability: self.change_probability,
            seed: self.seed,
            ..Default::default()
        };
        sys.validate()?;
        if self.n < 2 {
            return Err(Failure::Config(format!("need at least 2 samples, got {}", self.n)));
        }
        Ok(sys)
    }

    pub fn provenance(&self) -> String {
        format!(
            "[generator]\nkind = binary\nn = {}\nsigma = {:e}\nseed = {}\nchange_probability = {:e}\n",
            self.n, self.sigma, self.seed, self.change_probability
        )
    }

    pub fn from_provenance(path: &Path) -> Result<Self, Failure> {
        let ini = Ini::load_from_file(path)
            .map_err(|e| Failure::Config(format!("cannot read provenance {}: {e}", path.display())))?;
        let sec = ini
            .section(Some("generator"))
            .ok_or_else(|| Failure::Config(format!("{}: missing [generator] section", path.display())))?;
        let field = |k: &str| {
            sec.get(k)
                .ok_or_else(|| Failure::Config(format!("{}: missing {k}", path.display())))
        };
        if field("kind")? != "binary" {
            return Err(Failure::Config(format!("{}: unknown generator kind", path.display())));
        }
        let bad = |k: &str| Failure::Config(format!("{}: invalid {k}", path.display()));
        Ok(BinaryRequest {
            n: field("n")?.parse().map_err(|_| bad("n"))?,
            sigma: field("sigma")?.parse().map_err(|_| bad("sigma"))?,
            seed: field("seed")?.parse().map_err(|_| bad("seed"))?,
            change_probability: field("change_probability")?
                .parse()
                .map_err(|_| bad("change_probability"))?,
        })
    }

    pub fn generate(&self) -> Result<SplitData<f64>, Failure> {
        Ok(self.system()?.generate(self.n)?)
    }

    /// Writes `train.csv`, `test.csv` and `provenance.ini` into `out`.
    pub fn write(&self, out: &Path) -> Result<SplitData<f64>, Failure> {
        let data = self.generate()?;
        std::fs::create_dir_all(out).map_err(|e| Failure::Data(format!("cannot create {}: {e}", out.display())))?;
        save_trace(&out.join("train.csv"), &data.train)?;
        save_trace(&out.join("test.csv"), &data.test)?;
        let prov = out.join("provenance.ini");
        std::fs::write(&prov, self.provenance()).map_err(|e| Failure::Data(format!("cannot write {}: {e}", prov.display())))?;
        Ok(data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn provenance_regenerates_identical_data() {
        let dir = tempfile::tempdir().unwrap();
        let req = BinaryRequest {
            n: 50,
            sigma: 0.05,
            seed: 7,
            change_probability: 0.9,
        };
        let first = req.write(dir.path()).unwrap();
        let again = BinaryRequest::from_provenance(&dir.path().join("provenance.ini")).unwrap();
        assert_eq!(again, req);
        assert_eq!(again.generate().unwrap(), first);
    }

    #[test]
    fn negative_noise_is_a_config_error() {
        let req = BinaryRequest {
            n: 10,
            sigma: -1.0,
            seed: 0,
            change_probability: 0.9,
        };
        assert!(matches!(req.generate(), Err(Failure::Config(_))));
    }
}
