//! `registry`: dump the class registry.

use atlasforge_core::labelspace::{registry, registry_sha256};
use atlasforge_service::api::{RegistryClass, RegistryResponse};

use crate::RegistryArgs;

/// The same document `/v1/registry` serves, or an aligned table.
pub fn run(args: RegistryArgs) -> anyhow::Result<()> {
    if args.table {
        println!("{:>3}  {:<22}  group", "id", "name");
        for d in registry() {
            let group = serde_json::to_value(d.group).expect("group serializes");
            println!("{:>3}  {:<22}  {}", d.id.get(), d.name, group.as_str().unwrap_or_default());
        }
        println!("sha256 {}", registry_sha256());
    } else {
        let doc = RegistryResponse { sha256: registry_sha256(), classes: registry().iter().map(RegistryClass::from).collect() };
        println!("{}", serde_json::to_string_pretty(&doc).expect("registry serializes"));
    }
    Ok(())
}
