use serde_json::json;

fn main() {
    if let Err(e) = langsae::cli::run() {
        let chain: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
        let doc = json!({"error": {"message": e.to_string(), "chain": chain}});
        eprintln!("{doc}");
        std::process::exit(1);
    }
}
