//! Command-line front end. Exit codes: 0 success, 2 usage error, 3 invalid
//! input or runtime failure.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::evaluate::{evaluate, EvalConfig};
use crate::fields::PrimitiveKind;
use crate::fitter::{fit_with, FitConfig, FitMode};
use crate::geometry::{marching_cubes, rasterize_field, segment_points, Mesh};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::io;
use crate::model::ShapeModel;
use crate::synth::{corpus_shape, voxelize};
use crate::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_FAILURE: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "dpf", version, about = "Fit deformable primitive fields to voxel shapes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Voxelize a corpus shape with part labels.
    Synth {
        #[arg(long)]
        shape: String,
        #[arg(long, value_parser = ["32", "64"])]
        res: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit a model to a pair of targets.
    Fit {
        #[arg(long)]
        target32: PathBuf,
        #[arg(long)]
        target64: PathBuf,
        #[arg(long)]
        parts: usize,
        #[arg(long, value_parser = ["cuboid", "cylinder"])]
        primitive: String,
        #[arg(long, value_parser = ["full", "ppf-only"])]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: PathBuf,
        /// Steps per stage.
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        lr: Option<f64>,
        /// Write `<out>.ckpt` every K steps.
        #[arg(long)]
        checkpoint_every: Option<u64>,
    },
    /// Mesh the model's isosurface.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        iso: f64,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
        /// One OBJ object per part instead of the union.
        #[arg(long)]
        per_part: bool,
    },
    /// Label the occupied voxels of a grid by part.
    Segment {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Chamfer distance (x1000), IoU at 32^3 and m-IoU.
    Metrics {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference check of the loss gradient.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn execute(command: Command) -> Result<(), Error> {
    match command {
        Command::Synth { shape, res, out } => {
            let res: usize = res.parse().expect("validated by clap");
            let grid = voxelize(&corpus_shape(&shape)?, res)?;
            io::save_grid(&grid.into(), &out)
        }
        Command::Fit {
            target32,
            target64,
            parts,
            primitive,
            mode,
            seed,
            out,
            log,
            iters,
            lr,
            checkpoint_every,
        } => {
            let t32 = io::load_grid(&target32)?.grid;
            let t64 = io::load_grid(&target64)?.grid;
            let mut config = FitConfig {
                parts,
                primitive: primitive.parse::<PrimitiveKind>()?,
                mode: mode.parse::<FitMode>()?,
                seed,
                ..FitConfig::desk()
            };
            if let Some(n) = iters {
                config.iterations = [n, n];
            }
            if let Some(lr) = lr {
                config.lr = lr;
            }
            let ckpt = checkpoint_path(&out);
            let every = checkpoint_every.unwrap_or(0);
            let result = fit_with(&t32, &t64, &config, every, |m| {
                if every > 0 {
                    io::save_model(m, &ckpt)
                } else {
                    Ok(())
                }
            })?;
            io::save_model(&result.model, &out)?;
            io::write_file(&log, io::fit_log_csv(&result.log).as_bytes())?;
            match result.aborted {
                Some(e) => Err(e),
                None => Ok(()),
            }
        }
        Command::Extract {
            model,
            iso,
            res,
            out,
            per_part,
        } => {
            let model = io::load_model(&model)?;
            let text = if per_part {
                let meshes = part_meshes(&model, res, iso)?;
                let named: Vec<(String, &Mesh)> =
                    meshes.iter().enumerate().map(|(i, m)| (format!("part{i}"), m)).collect();
                let refs: Vec<(Option<&str>, &Mesh)> = named.iter().map(|(n, m)| (Some(n.as_str()), *m)).collect();
                io::meshes_to_obj(&refs)
            } else {
                io::mesh_to_obj(&marching_cubes(&rasterize_field(&model, res)?, iso)?)
            };
            io::write_file(&out, text.as_bytes())
        }
        Command::Segment { model, grid, out } => {
            let model = io::load_model(&model)?;
            let file = io::load_grid(&grid)?;
            let g = &file.grid;
            let occupied: Vec<usize> = (0..g.len()).filter(|&i| g.occupied(i)).collect();
            let points: Vec<_> = occupied.iter().map(|&i| g.center_of(i)).collect();
            let pred = segment_points(&model, &points);
            let mut s = String::from("voxel,x,y,z,part,label\n");
            for (k, &i) in occupied.iter().enumerate() {
                let p = points[k];
                let label = file.labels.as_ref().map_or(0, |l| l[i]);
                writeln!(s, "{i},{},{},{},{},{label}", p[0], p[1], p[2], pred.labels[k]).expect("write to string");
            }
            io::write_file(&out, s.as_bytes())
        }
        Command::Metrics { model, gt, report } => {
            let model = io::load_model(&model)?;
            let target = io::load_grid(&gt)?.labeled()?;
            let r = evaluate(&model, &target, &EvalConfig::default())?;
            io::write_file(&report, io::metrics_csv(&r.rows()).as_bytes())
        }
        Command::Gradcheck { trials, seed } => {
            let r = run_gradcheck(&GradcheckConfig {
                trials,
                seed,
                ..GradcheckConfig::default()
            })?;
            let worst = r.worst();
            println!(
                "trials {} redraws {} worst relative error {worst:.3e} elapsed {:.1}s",
                r.trials.len(),
                r.redraws,
                r.elapsed.as_secs_f64()
            );
            if worst < 1e-4 {
                Ok(())
            } else {
                Err(Error::Invalid(format!("worst relative error {worst:e} exceeds 1e-4")))
            }
        }
    }
}

fn checkpoint_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".ckpt");
    PathBuf::from(s)
}

/// Isosurface of each part's own field.
pub fn part_meshes(model: &ShapeModel, resolution: usize, level: f64) -> Result<Vec<Mesh>, Error> {
    model
        .parts()
        .iter()
        .map(|part| {
            let single = ShapeModel::new(vec![part.clone()], *model.field(), model.deformation_enabled())?;
            marching_cubes(&rasterize_field(&single, resolution)?, level)
        })
        .collect()
}
