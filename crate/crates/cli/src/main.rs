mod args;
mod commands;
mod model;

use std::fmt;
use std::process::ExitCode;

use clap::Parser;

use crate::args::{merge, Cli, Command};

/// Exit-code class attached to an error as context.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Code {
    Usage,
    Io,
    Numeric,
}

impl Code {
    fn exit(self) -> u8 {
        match self {
            Code::Usage => 2,
            Code::Io => 3,
            Code::Numeric => 4,
        }
    }
}

impl fmt::Display for Code {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Code::Usage => "invalid usage or configuration",
            Code::Io => "i/o failure",
            Code::Numeric => "numeric failure",
        })
    }
}

#[derive(Debug)]
struct Coded {
    code: Code,
    message: String,
}

impl fmt::Display for Coded {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Coded {}

pub(crate) fn coded(code: Code, message: impl Into<String>) -> impl std::error::Error + Send + Sync + 'static {
    Coded { code, message: message.into() }
}

fn classify(err: &anyhow::Error) -> u8 {
    // Numeric failures win over any context added on the way up.
    for cause in err.chain() {
        if let Some(mscale::Error::Numeric(_)) = cause.downcast_ref::<mscale::Error>() {
            return Code::Numeric.exit();
        }
    }
    if let Some(code) = err.downcast_ref::<Code>() {
        return code.exit();
    }
    for cause in err.chain() {
        if let Some(c) = cause.downcast_ref::<Coded>() {
            return c.code.exit();
        }
        match cause.downcast_ref::<mscale::Error>() {
            Some(mscale::Error::Io(_)) => return Code::Io.exit(),
            Some(mscale::Error::Csv(e)) if e.is_io_error() => return Code::Io.exit(),
            Some(_) => return Code::Usage.exit(),
            None => {}
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return Code::Io.exit();
        }
    }
    Code::Usage.exit()
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Generate(a) => commands::generate(merge(config, &a)?),
        Command::Fit(a) => commands::fit(merge(config, &a)?),
        Command::Rollout(a) => commands::rollout(merge(config, &a)?),
        Command::Components(a) => commands::components(merge(config, &a)?),
        Command::Evaluate(a) => commands::evaluate(merge(config, &a)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}
