use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use ecloss_core::metrics::{location_consistency_literal, top10_threshold};
use ecloss_core::nn::{
    init_params, read_checkpoint, train, write_checkpoint, Checkpoint, LogRow, NetworkSpec,
    TrainerState,
};
use ecloss_core::pipeline::{evaluate_with_assignment, run_network};
use ecloss_core::synthdata::{generate, read_dataset, split, write_dataset, Dataset, PartSpec};
use ecloss_core::templates::{build_full_set, deserialize, serialize, subsample_even, TemplateSet};
use ecloss_core::viz::{encode_pgm, render_overlay, upsample_bilinear, write_ppm, HeatmapStyle};

use crate::config::{ConfigError, Init, RunConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Subset {
    Train,
    Eval,
    All,
}

pub struct Session {
    pub config: RunConfig,
    out: PathBuf,
}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Session {
    pub fn new(config: RunConfig) -> Self {
        let out = PathBuf::from(config.out_dir());
        Self { config, out }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf> {
        fs::create_dir_all(&self.out)
            .with_context(|| format!("creating {}", self.out.display()))?;
        let path = self.out.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    fn write_resolved_config(&self, command: &str) -> Result<()> {
        self.write(&format!("{command}.cfg"), self.config.render().as_bytes())?;
        Ok(())
    }

    fn dataset(&self, path: Option<&Path>) -> Result<Dataset> {
        match path {
            Some(p) => {
                let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
                Ok(read_dataset(&bytes).with_context(|| format!("loading {}", p.display()))?)
            }
            None => Ok(generate(&self.config.dataset_spec()?, &PartSpec::face_parts())?),
        }
    }

    fn subset(&self, dataset: &Dataset, subset: Subset) -> Result<Vec<usize>> {
        if subset == Subset::All {
            return Ok((0..dataset.len()).collect());
        }
        let seed = self.config.dataset_spec()?.seed;
        let (train, eval) = split(dataset, self.config.split()?, seed)?;
        Ok(if subset == Subset::Train { train } else { eval })
    }

    fn templates(&self, path: Option<&Path>, target_hw: Option<(usize, usize)>) -> Result<TemplateSet> {
        let params = self.config.template_params(target_hw)?;
        if let Some(p) = path {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            let set = deserialize(&bytes).with_context(|| format!("loading {}", p.display()))?;
            let tp = set.params();
            if (tp.height, tp.width) != (params.height, params.width) {
                return Err(invalid(format!(
                    "template grid {}x{} does not match the {}x{} target maps",
                    tp.height, tp.width, params.height, params.width
                )));
            }
            return Ok(set);
        }
        let full = build_full_set(&params)?;
        let count = self.config.template_count()?;
        if count > full.len() {
            return Err(invalid(format!(
                "templates.count {count} exceeds the {} templates of a {}x{} grid",
                full.len(),
                params.height,
                params.width
            )));
        }
        Ok(subsample_even(&full, count, self.config.template_seed()?)?)
    }

    fn checkpoint(path: &Path) -> Result<Checkpoint> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        read_checkpoint(&bytes).with_context(|| format!("loading {}", path.display()))
    }

    pub fn gen_data(&self, pgm_samples: usize) -> Result<()> {
        let dataset = self.dataset(None)?;
        if pgm_samples > dataset.len() {
            return Err(invalid(format!(
                "asked for {pgm_samples} preview images of {} samples",
                dataset.len()
            )));
        }
        let bytes = write_dataset(&dataset);
        let path = self.write("dataset.ecds", &bytes)?;
        for (i, s) in dataset.samples.iter().take(pgm_samples).enumerate() {
            self.write(
                &format!("sample{i}.pgm"),
                &encode_pgm(&s.image, dataset.width, dataset.height)?,
            )?;
        }
        self.write_resolved_config("gen-data")?;
        println!("wrote {} samples to {}", dataset.len(), path.display());
        println!("sha256 {}", sha256_hex(&bytes));
        Ok(())
    }

    pub fn gen_templates(&self) -> Result<()> {
        let set = self.templates(None, None)?;
        let bytes = serialize(&set);
        let path = self.write("templates.ect", &bytes)?;
        self.write_resolved_config("gen-templates")?;
        println!("wrote {} templates to {} (prior {})", set.len(), path.display(), set.prior());
        println!("sha256 {}", sha256_hex(&bytes));
        Ok(())
    }

    pub fn train(&mut self, ecloss: bool, data: Option<&Path>, templates: Option<&Path>) -> Result<()> {
        if !ecloss {
            self.config.set("loss.beta", "0")?;
            self.config.set("loss.schedule", "fixed")?;
        }
        let dataset = self.dataset(data)?;
        let train_idx = self.subset(&dataset, Subset::Train)?;
        let spec = self.network(&dataset)?;
        let (_, th, tw) = spec.target_shape()?;
        let set = self.templates(templates, Some((th, tw)))?;
        let params = match self.config.init()? {
            Init::Glorot => init_params(&spec, self.config.seed()?)?,
            Init::Zero => vec![0.0; spec.param_count()?],
        };
        let state = TrainerState {
            params,
            learning_rate: self.config.learning_rate()?,
            batch_size: self.config.batch_size()?,
            step: 0,
            rng_seed: self.config.seed()?,
            loss_config: self.config.loss_config()?,
        };
        state.validate()?;
        let (state, log) = train(&spec, &dataset.labeled(&train_idx), &set, state, self.config.epochs()?)?;

        let mut csv = String::from(LogRow::CSV_HEADER);
        csv.push('\n');
        for row in &log {
            csv.push_str(&row.to_csv());
            csv.push('\n');
        }
        self.write("train_log.csv", csv.as_bytes())?;
        let ckpt = write_checkpoint(&Checkpoint { spec, params: state.params });
        let path = self.write("final.ecnn", &ckpt)?;
        self.write_resolved_config("train")?;
        match log.last() {
            Some(last) => println!(
                "{} steps, final cls_loss {:.6}, mi {:.6e}, beta {:e}",
                log.len(),
                last.cls_loss,
                last.mi,
                state.loss_config.beta
            ),
            None => println!("0 steps"),
        }
        println!("wrote {}", path.display());
        Ok(())
    }

    fn network(&self, dataset: &Dataset) -> Result<NetworkSpec> {
        if dataset.height != dataset.width {
            return Err(invalid("images must be square"));
        }
        Ok(self.config.network_spec(dataset.height, dataset.n_classes())?)
    }

    pub fn eval(
        &self,
        checkpoint: &Path,
        data: Option<&Path>,
        baseline: Option<&Path>,
        subset: Subset,
    ) -> Result<()> {
        let dataset = self.dataset(data)?;
        let indices = self.subset(&dataset, subset)?;
        let prominence_min = self.config.prominence_min()?;
        let evaluate = |path: &Path| -> Result<_> {
            let ck = Self::checkpoint(path)?;
            Ok(evaluate_with_assignment(&ck.spec, &ck.params, &dataset, &indices, prominence_min)?)
        };
        let (report, assignment) = evaluate(checkpoint)?;
        let mut csv = report.to_csv();
        if self.config.literal_ls()? {
            match location_consistency_literal(&assignment) {
                Ok((_, ls)) => csv.push_str(&format!("ls_literal,all,{ls:.9}\n")),
                Err(e) => eprintln!("literal location consistency rejected: {e}"),
            }
        }
        self.write("metrics.csv", csv.as_bytes())?;
        print!("{}", report.summary_table(if baseline.is_some() { "ecloss" } else { "model" }));
        if report.degenerate_maps > 0 {
            println!("{} of {} maps were constant", report.degenerate_maps, report.maps);
        }
        if let Some(b) = baseline {
            let (base, _) = evaluate(b)?;
            self.write("comparison.csv", report.comparison_csv(&base).as_bytes())?;
            print!("{}", base.summary_table("baseline").lines().nth(1).unwrap_or_default());
            println!();
        }
        self.write_resolved_config("eval")?;
        Ok(())
    }

    pub fn visualize(
        &self,
        checkpoint: &Path,
        data: Option<&Path>,
        samples: &[usize],
        channels: &[usize],
    ) -> Result<()> {
        let dataset = self.dataset(data)?;
        let ck = Self::checkpoint(checkpoint)?;
        let (n_channels, mh, mw) = ck.spec.target_shape()?;
        if let Some(&s) = samples.iter().find(|&&s| s >= dataset.len()) {
            return Err(invalid(format!("sample {s} out of range (dataset has {})", dataset.len())));
        }
        if let Some(&c) = channels.iter().find(|&&c| c >= n_channels) {
            return Err(invalid(format!("channel {c} out of range (target layer has {n_channels})")));
        }
        let style = HeatmapStyle {
            overlay_alpha: self.config.overlay_alpha()?,
            ..HeatmapStyle::default()
        };
        style.validate()?;
        let outputs = run_network(&ck.spec, &ck.params, &dataset, samples)?;
        let (h, w) = (dataset.height, dataset.width);
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        for (n, &s) in samples.iter().enumerate() {
            for &c in channels {
                let up = upsample_bilinear(outputs.map(n, c), mh, mw, h, w)?;
                let tmap = top10_threshold(&up, h, w)?;
                let image = render_overlay(&dataset.samples[s].image, &tmap, &style)?;
                let path = self.out.join(format!("s{s}_c{c}.ppm"));
                write_ppm(&image, &path)?;
                println!("wrote {}", path.display());
            }
        }
        self.write_resolved_config("visualize")?;
        Ok(())
    }
}
