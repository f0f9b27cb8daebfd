use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use artcarto::atlas::AtlasMap;
use artcarto::cartograph::CartographyConfig;
use artcarto::curate::FusionConfig;
use artcarto::geometry::Rect;
use artcarto::pipeline::{self, BuildConfig};
use artcarto::project::ProjectionConfig;
use artcarto::server::{self, ServerConfig};
use artcarto::synth::{self, SynthConfig};
use artcarto::{corpus, trails};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "artcarto", version, about = "Build, serve and analyze embedding atlases of art collections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Curate, fuse, project and regionize a corpus into an atlas JSON file.
    Build(BuildArgs),
    /// Serve the HTTP API.
    Serve(ServeArgs),
    /// Classify an exploration trace and write a report.
    Analyze(AnalyzeArgs),
    /// Write a seeded synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args)]
struct BuildArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 64)]
    n_regions: usize,
    #[arg(long, default_value_t = 8)]
    n_countries: usize,
    /// Side length of the square map.
    #[arg(long, default_value_t = 1000.0)]
    map_size: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    w_visual: f64,
    #[arg(long, default_value_t = 1.0)]
    w_joint: f64,
    #[arg(long, default_value_t = 1.0)]
    w_text: f64,
    #[arg(long, default_value_t = 0.5)]
    alpha_keyword: f64,
    #[arg(long, default_value_t = artcarto::curate::DEFAULT_SALIENT_K)]
    salient_k: usize,
    #[arg(long, default_value_t = 15)]
    n_neighbors: usize,
    #[arg(long, default_value_t = 0.1)]
    min_dist: f64,
    #[arg(long, default_value_t = 200)]
    n_epochs: usize,
    #[arg(long, default_value_t = 3.0)]
    outlier_mad: f64,
    #[arg(long, default_value_t = 0.5)]
    min_separation: f64,
}

impl BuildArgs {
    fn config(&self) -> BuildConfig {
        BuildConfig {
            fusion: FusionConfig {
                w_visual: self.w_visual,
                w_joint: self.w_joint,
                w_text: self.w_text,
                alpha_keyword: self.alpha_keyword,
            },
            salient_k: self.salient_k,
            projection: ProjectionConfig {
                n_neighbors: self.n_neighbors,
                min_dist: self.min_dist,
                n_epochs: self.n_epochs,
                seed: self.seed,
                ..ProjectionConfig::default()
            },
            cartography: CartographyConfig {
                n_regions: self.n_regions,
                n_countries: self.n_countries,
                map_rect: Rect::square(self.map_size),
                outlier_mad: self.outlier_mad,
                min_separation: self.min_separation,
                seed: self.seed,
                ..CartographyConfig::default()
            },
        }
    }
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, env = "ARTCARTO_ATLAS")]
    atlas: Option<PathBuf>,
    #[arg(long, env = "ARTCARTO_CORPUS")]
    corpus: Option<PathBuf>,
    /// Base URL of the generation service; the offline mock is used when unset.
    #[arg(long, env = "ARTCARTO_GEN_URL")]
    gen_url: Option<String>,
    #[arg(long, env = "ARTCARTO_DATA_DIR", default_value = "artcarto-data")]
    data_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    atlas: PathBuf,
    /// Event log in JSONL, one event per line.
    #[arg(long)]
    events: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.15)]
    theta_jump: f64,
    #[arg(long, default_value_t = 0.05)]
    theta_small: f64,
    #[arg(long, default_value_t = 3)]
    min_run: usize,
    #[arg(long, default_value_t = 0.08)]
    r_return: f64,
    #[arg(long, default_value_t = 0.20)]
    r_away: f64,
    #[arg(long, default_value_t = 0.40)]
    theta_time: f64,
    #[arg(long, default_value_t = 0.50)]
    theta_collect: f64,
    /// Marginal band widths in percent.
    #[arg(long, value_delimiter = ',', default_values_t = trails::DEFAULT_BANDS)]
    bands: Vec<f64>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    n_artworks: usize,
    #[arg(long, default_value_t = 8)]
    clusters: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 32)]
    dim_visual: usize,
    #[arg(long, default_value_t = 16)]
    dim_joint: usize,
    #[arg(long, default_value_t = 12)]
    dim_text: usize,
}

fn build(args: BuildArgs) -> anyhow::Result<()> {
    let bundle = corpus::load_corpus(&args.manifest)?;
    let built = pipeline::build_atlas(&bundle, &args.config())?;
    built.atlas.save(&args.out)?;
    let meta = &built.atlas.build_meta;
    println!(
        "{} artworks, {} keywords selected, {} regions, {} countries, {} outliers nudged",
        meta.artwork_count, meta.selected_keywords, meta.effective_regions, meta.effective_countries, meta.nudged_outliers
    );
    println!("atlas {} -> {}", built.atlas.content_hash(), args.out.display());
    Ok(())
}

fn analyze(args: AnalyzeArgs) -> anyhow::Result<()> {
    let atlas = AtlasMap::load(&args.atlas)?;
    let text = fs::read_to_string(&args.events).with_context(|| args.events.display().to_string())?;
    let events = trails::parse_jsonl(&text)?;
    let session = args
        .events
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let trace = trails::Trace::new(session, events, atlas.bounds.diagonal())?;
    let th = trails::Thresholds {
        jump: args.theta_jump,
        small: args.theta_small,
        min_run: args.min_run,
        r_return: args.r_return,
        r_away: args.r_away,
        time_share: args.theta_time,
        collect_share: args.theta_collect,
    };
    let report = trails::analyze(&trace, &atlas, &th, &args.bands);
    trails::emit_report(&trace, &report, &atlas.bounds, &args.out)?;
    println!(
        "{} events, {} moves: {} jumps, {} wanders, {} revisits, {} fixations",
        report.event_count,
        report.moves.len(),
        report.jumps.len(),
        report.wanders.len(),
        report.revisits.len(),
        report.fixations.len()
    );
    print!("{}", report.band_table);
    println!("report written to {}", args.out.display());
    Ok(())
}

fn write_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = SynthConfig {
        n_artworks: args.n_artworks,
        n_clusters: args.clusters,
        dim_visual: args.dim_visual,
        dim_joint: args.dim_joint,
        dim_text: args.dim_text,
        seed: args.seed,
        ..SynthConfig::default()
    };
    let corpus = synth::synth_corpus(&cfg)?;
    let manifest = corpus::save_corpus(&corpus.bundle, &args.out)?;
    println!("{}", manifest.display());
    Ok(())
}

fn main() -> anyhow::Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Build(a) => build(a),
        Command::Analyze(a) => analyze(a),
        Command::Synth(a) => write_synth(a),
        Command::Serve(a) => {
            let cfg = ServerConfig {
                atlas: a.atlas,
                corpus: a.corpus,
                gen_url: a.gen_url,
                data_dir: a.data_dir,
            };
            tokio::runtime::Runtime::new()?.block_on(server::serve(cfg, a.port))
        }
    }
}
