//! Command line grammar and its translation into operations.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use udocker_core::metadata::Overrides;
use udocker_core::repo::ImageRef;
use udocker_core::ExecMode;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "udocker", about = "Run containers without privileges", disable_version_flag = true)]
pub struct Cli {
    /// Repository directory (default: $UDOCKER_DIR, then $HOME/.udocker).
    #[arg(long, global = true, value_name = "DIR")]
    pub repo: Option<PathBuf>,
    /// More diagnostics on stderr; repeat for more.
    #[arg(short = 'D', long = "debug", global = true, action = clap::ArgAction::Count)]
    pub debug: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub verb: Verb,
}

#[derive(Debug, Subcommand)]
pub enum Verb {
    /// Install the engine support files into the repository.
    Install(InstallArgs),
    /// Download an image from a registry.
    Pull {
        image: String,
        /// Plain HTTP, for local registries.
        #[arg(long)]
        insecure: bool,
        /// `user:password` for the registry.
        #[arg(long, value_name = "USER:PASS")]
        login: Option<String>,
    },
    /// List local images.
    Images,
    /// Create a container from a local image and print its id.
    Create {
        #[arg(long)]
        name: Option<String>,
        image: String,
    },
    /// Give a container an alias.
    Name { container: String, name: String },
    /// Remove a container alias.
    Rmname { name: String },
    /// List containers.
    Ps,
    /// Run a command in a container.
    Run(RunArgs),
    /// Show or choose the execution mode of a container.
    Setup {
        #[arg(long, value_name = "MODE")]
        execmode: Option<String>,
        container: String,
    },
    /// Delete containers.
    Rm {
        #[arg(required = true)]
        containers: Vec<String>,
    },
    /// Delete a local image.
    Rmi { image: String },
    /// Write a container's tree as a tar archive.
    Export {
        #[arg(short, long, value_name = "FILE")]
        output: PathBuf,
        container: String,
    },
    /// Create a container from a tar archive of a tree and print its id.
    Import {
        tarball: PathBuf,
        #[arg(long)]
        name: Option<String>,
    },
    /// Protect a container or image from removal.
    Protect { target: String },
    /// Allow removal of a container or image again.
    Unprotect { target: String },
    /// Time a workload in several execution modes.
    Bench {
        manifest: PathBuf,
        #[arg(long, value_name = "FILE")]
        csv: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        svg: Option<PathBuf>,
    },
    /// Print the version.
    Version,
}

#[derive(Debug, Args)]
pub struct InstallArgs {
    /// Install from a local tool tarball instead of the bundled files.
    #[arg(long = "from", value_name = "TARBALL")]
    pub from: Option<PathBuf>,
    /// Expected sha256 of the tarball (default: `<TARBALL>.sha256`).
    #[arg(long, value_name = "HEX")]
    pub sha256: Option<String>,
    /// Reinstall even when the installed version matches.
    #[arg(long)]
    pub force: bool,
    /// Write the bundled files as a tool tarball and exit.
    #[arg(long, value_name = "TARBALL", conflicts_with = "from")]
    pub pack: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Bind `host[:container]`; repeatable.
    #[arg(short = 'v', long = "volume", value_name = "HOST[:CONTAINER]")]
    pub volumes: Vec<String>,
    /// `KEY=VALUE`, or `KEY` to copy the host value; repeatable.
    #[arg(short = 'e', long = "env", value_name = "VAR")]
    pub env: Vec<String>,
    #[arg(short = 'w', long = "workdir", value_name = "DIR")]
    pub workdir: Option<String>,
    #[arg(short = 'u', long = "user", value_name = "USER")]
    pub user: Option<String>,
    /// Pass the host environment.
    #[arg(long)]
    pub hostenv: bool,
    /// Use the host's passwd and group files.
    #[arg(long)]
    pub hostauth: bool,
    /// Bind the invoking user's home directory.
    #[arg(long)]
    pub bindhome: bool,
    /// Bind what direct rendering needs.
    #[arg(long)]
    pub dri: bool,
    /// Alias for a container created from an image on the fly.
    #[arg(long)]
    pub name: Option<String>,
    /// Execution mode for this and later runs.
    #[arg(long, value_name = "MODE")]
    pub execmode: Option<String>,
    /// Container id, alias, or local image.
    pub container: String,
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "COMMAND")]
    pub command: Vec<String>,
}

/// What a command line asks for, validated.
#[derive(Debug, Clone, PartialEq)]
pub enum Operation {
    Install {
        from: Option<PathBuf>,
        sha256: Option<String>,
        force: bool,
        pack: Option<PathBuf>,
    },
    Pull {
        image: ImageRef,
        insecure: bool,
        credentials: Option<(String, String)>,
    },
    Images,
    Create {
        image: ImageRef,
        name: Option<String>,
    },
    Name {
        container: String,
        name: String,
    },
    Rmname {
        name: String,
    },
    Ps,
    Run {
        container: String,
        name: Option<String>,
        overrides: Overrides,
    },
    Setup {
        container: String,
        mode: Option<ExecMode>,
    },
    Rm {
        containers: Vec<String>,
    },
    Rmi {
        image: ImageRef,
    },
    Export {
        container: String,
        output: PathBuf,
    },
    Import {
        tarball: PathBuf,
        name: Option<String>,
    },
    Protect {
        target: String,
        on: bool,
    },
    Bench {
        manifest: PathBuf,
        csv: Option<PathBuf>,
        svg: Option<PathBuf>,
    },
    Version,
}

impl Operation {
    /// Whether the operation works on the repository.
    pub fn needs_repo(&self) -> bool {
        !matches!(self, Operation::Version | Operation::Install { pack: Some(_), .. })
    }
}

fn image(s: &str) -> Result<ImageRef, CliError> {
    s.parse().map_err(|e| CliError::Usage(format!("{e}")))
}

fn mode(s: &str) -> Result<ExecMode, CliError> {
    s.parse().map_err(|e| CliError::Usage(format!("{e}")))
}

impl Verb {
    pub fn plan(self) -> Result<Operation, CliError> {
        Ok(match self {
            Verb::Install(a) => Operation::Install {
                from: a.from,
                sha256: a.sha256,
                force: a.force,
                pack: a.pack,
            },
            Verb::Pull { image: i, insecure, login } => {
                let credentials = match login {
                    None => None,
                    Some(l) => match l.split_once(':') {
                        Some((u, p)) => Some((u.to_string(), p.to_string())),
                        None => return Err(CliError::Usage("--login expects USER:PASS".into())),
                    },
                };
                Operation::Pull {
                    image: image(&i)?,
                    insecure,
                    credentials,
                }
            }
            Verb::Images => Operation::Images,
            Verb::Create { name, image: i } => Operation::Create { image: image(&i)?, name },
            Verb::Name { container, name } => Operation::Name { container, name },
            Verb::Rmname { name } => Operation::Rmname { name },
            Verb::Ps => Operation::Ps,
            Verb::Run(r) => {
                let name = r.name.clone();
                let container = r.container.clone();
                Operation::Run {
                    container,
                    name,
                    overrides: r.overrides()?,
                }
            }
            Verb::Setup { execmode, container } => Operation::Setup {
                container,
                mode: execmode.as_deref().map(mode).transpose()?,
            },
            Verb::Rm { containers } => Operation::Rm { containers },
            Verb::Rmi { image: i } => Operation::Rmi { image: image(&i)? },
            Verb::Export { output, container } => Operation::Export { container, output },
            Verb::Import { tarball, name } => Operation::Import { tarball, name },
            Verb::Protect { target } => Operation::Protect { target, on: true },
            Verb::Unprotect { target } => Operation::Protect { target, on: false },
            Verb::Bench { manifest, csv, svg } => Operation::Bench { manifest, csv, svg },
            Verb::Version => Operation::Version,
        })
    }
}

impl RunArgs {
    pub fn overrides(&self) -> Result<Overrides, CliError> {
        Ok(Overrides {
            argv: self.command.clone(),
            env: self.env.clone(),
            volumes: self.volumes.clone(),
            workdir: self.workdir.clone(),
            user: self.user.clone(),
            hostenv: self.hostenv,
            hostauth: self.hostauth,
            bindhome: self.bindhome,
            dri: self.dri,
            mode: self.execmode.as_deref().map(mode).transpose()?,
        })
    }
}

/// Options that apply to every verb.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Globals {
    pub repo: Option<PathBuf>,
    pub debug: u8,
    pub quiet: bool,
}

/// Parses a full command line, program name first.
pub fn parse<I, T>(argv: I) -> Result<(Globals, Operation), CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let Cli { repo, debug, quiet, verb } = Cli::try_parse_from(argv).map_err(CliError::Clap)?;
    Ok((Globals { repo, debug, quiet }, verb.plan()?))
}
