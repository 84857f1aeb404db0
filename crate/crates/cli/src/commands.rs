use std::io::Read;
use std::net::SocketAddr;

use anyhow::{bail, Context, Result};
use litextract_core::engine::PriceTable;
use litextract_core::mapping::{default_rules, map_columns, rules_from_json, Category};
use litextract_core::schema::validate_template;
use litextract_core::store::LocalStore;
use litextract_core::table::load_path;
use litextract_mock::{MockScript, MockServer};
use litextract_service::{serve as start_service, AppState};

use crate::{config, CostArgs, MapArgs, MockArgs, PromptArgs, ServeArgs, SetKeyArgs, EXIT_OK};

pub fn map(args: MapArgs) -> Result<u8> {
    let table = load_path(&args.input).with_context(|| format!("cannot parse {}", args.input.display()))?;
    let rules = match &args.rules {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            rules_from_json(&text)?
        }
        None => default_rules(),
    };
    let mapping = map_columns(table.columns(), &rules);
    if args.json {
        println!("{}", serde_json::to_string_pretty(&mapping)?);
        return Ok(EXIT_OK);
    }
    for category in Category::ALL {
        let column = mapping.column_for(category).unwrap_or("-");
        println!("{:<18} {column}", category.label());
    }
    let unmapped: Vec<&str> = table
        .columns()
        .iter()
        .map(String::as_str)
        .filter(|c| !mapping.entries().iter().any(|e| e.column == *c))
        .collect();
    if !unmapped.is_empty() {
        println!("{:<18} {}", "(unmapped)", unmapped.join(", "));
    }
    Ok(EXIT_OK)
}

pub fn prompt(args: PromptArgs) -> Result<u8> {
    let table = match &args.input {
        Some(path) => Some(load_path(path).with_context(|| format!("cannot parse {}", path.display()))?),
        None => None,
    };
    let mapping = table.as_ref().map(|t| map_columns(t.columns(), &default_rules()));
    let schema = config::resolve_schema(&args.schema, table.as_ref().zip(mapping.as_ref()))?;
    let bundle = schema.bundle()?;
    println!("{}", bundle.system_prompt);
    if let Some(table) = &table {
        let report = validate_template(&bundle.user_template, table.columns())?;
        if !report.is_valid() {
            bail!("template names unknown columns: {}", report.unknown.join(", "));
        }
        let Some(record) = table.row(args.row) else {
            bail!("row {} does not exist ({} rows)", args.row, table.len());
        };
        println!("\n--- user prompt (row {}) ---\n{}", args.row, bundle.render(record)?);
    }
    Ok(EXIT_OK)
}

pub async fn serve(store: LocalStore, args: ServeArgs) -> Result<u8> {
    let state = AppState::new(store);
    let handle = start_service(state, SocketAddr::new(args.host, args.port)).await?;
    println!("control service listening on {}", handle.url());
    tokio::signal::ctrl_c().await?;
    handle.shutdown().await;
    Ok(EXIT_OK)
}

pub async fn mock(args: MockArgs) -> Result<u8> {
    let script = MockScript::new(args.failure_rate, args.seed)?
        .with_latency(args.latency)
        .with_noise(args.noise);
    let server = MockServer::start(script, SocketAddr::from(([127, 0, 0, 1], args.port))).await?;
    println!("mock provider listening on {}", server.base_url());
    tokio::signal::ctrl_c().await?;
    eprintln!(
        "served {} requests, max in flight {}",
        server.request_count(),
        server.max_in_flight()
    );
    server.shutdown().await;
    Ok(EXIT_OK)
}

pub fn clear(store: &LocalStore) -> Result<u8> {
    store.clear_all_data()?;
    println!("cleared stored credentials, settings and checkpoints in {}", store.root().display());
    Ok(EXIT_OK)
}

pub fn set_key(store: &LocalStore, args: SetKeyArgs) -> Result<u8> {
    let key = match args.key {
        Some(k) => k,
        None => {
            let mut buf = String::new();
            std::io::stdin().read_to_string(&mut buf)?;
            buf
        }
    };
    store.store_credential(args.provider, key.trim())?;
    println!("stored key for {}", args.provider);
    Ok(EXIT_OK)
}

pub fn cost(args: CostArgs) -> Result<u8> {
    let table = match &args.prices {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
            PriceTable::from_json(&text)?
        }
        None => PriceTable::builtin(),
    };
    let Some(total) = table.cost(&args.model, args.records, args.input_tokens, args.output_tokens) else {
        bail!("no price for model {}", args.model);
    };
    println!(
        "{}: {} records x ({} in + {} out tokens) = ${total:.4}",
        args.model, args.records, args.input_tokens, args.output_tokens
    );
    Ok(EXIT_OK)
}
