//! Catalog model, entity decomposition and schema rendering.
//!
//! A catalog is parsed from a versioned JSON document, validated, and then
//! treated as immutable. [`decompose`] turns it into one [`SchemaEntity`] per
//! (owner, entity kind) pair with populated source text, and
//! [`Catalog::render`] emits the XML-tagged schema text consumed by the
//! prompting stages.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Version tag accepted by [`parse_catalog`].
pub const CATALOG_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("malformed catalog document: {0}")]
    Malformed(String),
    #[error("unsupported catalog version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("{path}: duplicate name `{name}`")]
    Duplicate { path: String, name: String },
    #[error("{path}: foreign key `{key}` references unknown column `{missing}`")]
    DanglingForeignKey {
        path: String,
        key: String,
        missing: String,
    },
    #[error("unknown table `{0}`")]
    UnknownTable(TableRef),
    #[error("unknown column `{column}` in table `{table}`")]
    UnknownColumn { table: TableRef, column: String },
}

/// The full catalog: databases, their tables and columns.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Catalog {
    pub databases: Vec<Database>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Database {
    pub name: String,
    #[serde(default)]
    pub tables: Vec<Table>,
    #[serde(default)]
    pub foreign_keys: Vec<ForeignKey>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    pub columns: Vec<Column>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub data_type: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub description: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub value_description: Option<String>,
}

/// `table.column` endpoint of a foreign key, scoped to its database.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

/// A `t1.c1=t2.c2` equality between two columns of the same database.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ForeignKey {
    pub from: ColumnRef,
    pub to: ColumnRef,
}

impl fmt::Display for ForeignKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}={}", self.from, self.to)
    }
}

impl FromStr for ForeignKey {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let endpoint = |part: &str| -> Result<ColumnRef, String> {
            let part = part.trim();
            match part.rsplit_once('.') {
                Some((table, column)) if !table.is_empty() && !column.is_empty() => {
                    Ok(ColumnRef {
                        table: table.to_string(),
                        column: column.to_string(),
                    })
                }
                _ => Err(format!("foreign key endpoint `{part}` is not `table.column`")),
            }
        };
        let (lhs, rhs) = s
            .split_once('=')
            .ok_or_else(|| format!("foreign key `{s}` is not `table.column=table.column`"))?;
        Ok(ForeignKey {
            from: endpoint(lhs)?,
            to: endpoint(rhs)?,
        })
    }
}

impl TryFrom<String> for ForeignKey {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<ForeignKey> for String {
    fn from(value: ForeignKey) -> Self {
        value.to_string()
    }
}

/// Fully qualified table name, displayed as `database.table`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TableRef {
    pub database: String,
    pub table: String,
}

impl TableRef {
    pub fn new(database: impl Into<String>, table: impl Into<String>) -> Self {
        Self {
            database: database.into(),
            table: table.into(),
        }
    }
}

impl fmt::Display for TableRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.database, self.table)
    }
}

impl FromStr for TableRef {
    type Err = String;

    /// Splits at the first dot: database names never contain one, table names may.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once('.') {
            Some((db, table)) if !db.is_empty() && !table.is_empty() => Ok(TableRef::new(db, table)),
            _ => Err(format!("`{s}` is not a `database.table` name")),
        }
    }
}

impl TryFrom<String> for TableRef {
    type Error = String;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        value.parse()
    }
}

impl From<TableRef> for String {
    fn from(value: TableRef) -> Self {
        value.to_string()
    }
}

/// Granularity an entity kind describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Table,
    Column,
}

/// One category of schema metadata.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityKind {
    TableName,
    TableAlias,
    TableDescription,
    ColumnName,
    ColumnAlias,
    ColumnDescription,
    ValueDescription,
}

impl EntityKind {
    pub const ALL: [EntityKind; 7] = [
        EntityKind::TableName,
        EntityKind::TableAlias,
        EntityKind::TableDescription,
        EntityKind::ColumnName,
        EntityKind::ColumnAlias,
        EntityKind::ColumnDescription,
        EntityKind::ValueDescription,
    ];

    pub fn level(self) -> Level {
        match self {
            EntityKind::TableName | EntityKind::TableAlias | EntityKind::TableDescription => {
                Level::Table
            }
            _ => Level::Column,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EntityKind::TableName => "table_name",
            EntityKind::TableAlias => "table_alias",
            EntityKind::TableDescription => "table_description",
            EntityKind::ColumnName => "column_name",
            EntityKind::ColumnAlias => "column_alias",
            EntityKind::ColumnDescription => "column_description",
            EntityKind::ValueDescription => "value_description",
        }
    }

    /// Parses a comma-separated list such as `table_name,column_name`.
    pub fn parse_list(s: &str) -> Result<BTreeSet<EntityKind>, String> {
        s.split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(str::parse)
            .collect()
    }
}

impl fmt::Display for EntityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EntityKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EntityKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown entity type `{s}`"))
    }
}

/// Stable identifier of a schema entity: `db/table[/column]#kind`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EntityId(pub String);

impl EntityId {
    pub fn for_owner(database: &str, table: &str, column: Option<&str>, kind: EntityKind) -> Self {
        match column {
            Some(c) => EntityId(format!("{database}/{table}/{c}#{kind}")),
            None => EntityId(format!("{database}/{table}#{kind}")),
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EntityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// One retrievable unit of schema text, tagged with the element it came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaEntity {
    pub id: EntityId,
    pub database: String,
    pub table: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub column: Option<String>,
    pub kind: EntityKind,
    pub text: String,
}

impl SchemaEntity {
    pub fn table_ref(&self) -> TableRef {
        TableRef::new(&self.database, &self.table)
    }
}

#[derive(Deserialize)]
struct CatalogDocument {
    version: u32,
    #[serde(default)]
    databases: Vec<Database>,
}

#[derive(Serialize)]
struct CatalogDocumentRef<'a> {
    version: u32,
    databases: &'a [Database],
}

/// Parses and validates a catalog document.
pub fn parse_catalog(input: &str) -> Result<Catalog, CatalogError> {
    let doc: CatalogDocument =
        serde_json::from_str(input).map_err(|e| CatalogError::Malformed(e.to_string()))?;
    if doc.version != CATALOG_FORMAT_VERSION {
        return Err(CatalogError::Version {
            found: doc.version,
            expected: CATALOG_FORMAT_VERSION,
        });
    }
    let catalog = Catalog {
        databases: doc.databases,
    };
    catalog.validate()?;
    Ok(catalog)
}

fn present(field: &Option<String>) -> Option<&str> {
    field.as_deref().filter(|s| !s.trim().is_empty())
}

impl Catalog {
    /// Serializes back into the versioned document format.
    pub fn to_document(&self) -> String {
        let doc = CatalogDocumentRef {
            version: CATALOG_FORMAT_VERSION,
            databases: &self.databases,
        };
        serde_json::to_string_pretty(&doc).expect("catalog serialization is infallible")
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let mut db_names = HashSet::new();
        for (di, db) in self.databases.iter().enumerate() {
            let db_path = format!("databases[{di}]");
            if db.name.trim().is_empty() {
                return Err(invalid(&db_path, "database name is empty"));
            }
            if !db_names.insert(db.name.as_str()) {
                return Err(CatalogError::Duplicate {
                    path: db_path,
                    name: db.name.clone(),
                });
            }
            let mut table_names = HashSet::new();
            for (ti, table) in db.tables.iter().enumerate() {
                let t_path = format!("{db_path}.tables[{ti}]");
                if table.name.trim().is_empty() {
                    return Err(invalid(&t_path, "table name is empty"));
                }
                if !table_names.insert(table.name.as_str()) {
                    return Err(CatalogError::Duplicate {
                        path: t_path,
                        name: table.name.clone(),
                    });
                }
                if table.columns.is_empty() {
                    return Err(invalid(&t_path, "table has no columns"));
                }
                let mut col_names = HashSet::new();
                for (ci, col) in table.columns.iter().enumerate() {
                    let c_path = format!("{t_path}.columns[{ci}]");
                    if col.name.trim().is_empty() {
                        return Err(invalid(&c_path, "column name is empty"));
                    }
                    if !col_names.insert(col.name.as_str()) {
                        return Err(CatalogError::Duplicate {
                            path: c_path,
                            name: col.name.clone(),
                        });
                    }
                }
            }
            for (fi, fk) in db.foreign_keys.iter().enumerate() {
                for end in [&fk.from, &fk.to] {
                    let exists = db
                        .tables
                        .iter()
                        .find(|t| t.name == end.table)
                        .is_some_and(|t| t.columns.iter().any(|c| c.name == end.column));
                    if !exists {
                        return Err(CatalogError::DanglingForeignKey {
                            path: format!("{db_path}.foreign_keys[{fi}]"),
                            key: fk.to_string(),
                            missing: end.to_string(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    pub fn database(&self, name: &str) -> Option<&Database> {
        self.databases.iter().find(|d| d.name == name)
    }

    pub fn table(&self, table: &TableRef) -> Option<&Table> {
        self.database(&table.database)?
            .tables
            .iter()
            .find(|t| t.name == table.table)
    }

    pub fn table_refs(&self) -> impl Iterator<Item = TableRef> + '_ {
        self.databases.iter().flat_map(|db| {
            db.tables
                .iter()
                .map(move |t| TableRef::new(&db.name, &t.name))
        })
    }

    pub fn table_count(&self) -> usize {
        self.databases.iter().map(|d| d.tables.len()).sum()
    }

    /// Resolves an entity's owner tags back to its table and, for
    /// column-level entities, its column.
    pub fn resolve(&self, entity: &SchemaEntity) -> Option<(&Table, Option<&Column>)> {
        let table = self.table(&entity.table_ref())?;
        match &entity.column {
            None => Some((table, None)),
            Some(c) => table
                .columns
                .iter()
                .find(|col| &col.name == c)
                .map(|col| (table, Some(col))),
        }
    }

    /// Renders the selected tables in the XML-tagged schema format.
    ///
    /// Tables are grouped into one `<db>` block per database, in order of the
    /// database's first appearance in `selection`; within a block tables keep
    /// selection order. Foreign keys are emitted only when both endpoint
    /// tables are selected.
    pub fn render(
        &self,
        selection: &[TableSelection],
        options: &RenderOptions,
    ) -> Result<String, CatalogError> {
        let mut groups: Vec<(&Database, Vec<FilteredTable<'_>>)> = Vec::new();
        let mut seen = HashSet::new();
        for sel in selection {
            let tref = &sel.table;
            let db = self
                .database(&tref.database)
                .ok_or_else(|| CatalogError::UnknownTable(tref.clone()))?;
            let table = db
                .tables
                .iter()
                .find(|t| t.name == tref.table)
                .ok_or_else(|| CatalogError::UnknownTable(tref.clone()))?;
            if let Some(filter) = &sel.filter {
                for col in filter.columns.keys() {
                    if !table.columns.iter().any(|c| &c.name == col) {
                        return Err(CatalogError::UnknownColumn {
                            table: tref.clone(),
                            column: col.clone(),
                        });
                    }
                }
            }
            if !seen.insert(tref) {
                continue;
            }
            match groups.iter_mut().find(|(d, _)| d.name == db.name) {
                Some((_, tables)) => tables.push((table, sel.filter.as_ref())),
                None => groups.push((db, vec![(table, sel.filter.as_ref())])),
            }
        }

        let blocks: Vec<String> = groups
            .iter()
            .map(|(db, tables)| render_database(db, tables, options))
            .collect();
        Ok(blocks.join("\n\n"))
    }

    /// Full schema text of a single table, all metadata included.
    pub fn render_table(&self, table: &TableRef, options: &RenderOptions) -> Result<String, CatalogError> {
        self.render(&[TableSelection::full(table.clone())], options)
    }
}

fn invalid(path: &str, message: &str) -> CatalogError {
    CatalogError::Invalid {
        path: path.to_string(),
        message: message.to_string(),
    }
}

/// Restricts which parts of a table are rendered.
///
/// Column name and data type are always shown for a listed column; other
/// fields only when their kind is listed for that column.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityFilter {
    pub table_kinds: BTreeSet<EntityKind>,
    pub columns: BTreeMap<String, BTreeSet<EntityKind>>,
}

impl EntityFilter {
    /// Adds the owner and kind of `entity` to the filter.
    pub fn insert(&mut self, column: Option<&str>, kind: EntityKind) {
        match column {
            Some(c) => {
                self.columns.entry(c.to_string()).or_default().insert(kind);
            }
            None => {
                self.table_kinds.insert(kind);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TableSelection {
    pub table: TableRef,
    /// `None` renders the whole table.
    pub filter: Option<EntityFilter>,
}

impl TableSelection {
    pub fn full(table: TableRef) -> Self {
        Self { table, filter: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderOptions {
    pub include_table_descriptions: bool,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            include_table_descriptions: true,
        }
    }
}

type FilteredTable<'a> = (&'a Table, Option<&'a EntityFilter>);

fn render_database(
    db: &Database,
    tables: &[FilteredTable<'_>],
    options: &RenderOptions,
) -> String {
    let mut parts: Vec<String> = tables
        .iter()
        .map(|(t, f)| render_table_block(t, *f, options))
        .collect();

    let selected: HashSet<&str> = tables.iter().map(|(t, _)| t.name.as_str()).collect();
    let keys: Vec<String> = db
        .foreign_keys
        .iter()
        .filter(|fk| selected.contains(fk.from.table.as_str()) && selected.contains(fk.to.table.as_str()))
        .map(ToString::to_string)
        .collect();
    if !keys.is_empty() {
        parts.push(format!("<foreign_keys>\n{}\n</foreign_keys>", keys.join("\n")));
    }
    format!("<db>{}\n\n{}\n\n</db>", db.name, parts.join("\n\n"))
}

fn render_table_block(table: &Table, filter: Option<&EntityFilter>, options: &RenderOptions) -> String {
    let wants_table = |kind| filter.is_none_or(|f| f.table_kinds.contains(&kind));
    let mut out = format!("<table>{}\n", table.name);

    let mut header = false;
    if let Some(alias) = present(&table.alias).filter(|_| wants_table(EntityKind::TableAlias)) {
        out.push_str(&format!("<alias>\n{alias}\n</alias>\n"));
        header = true;
    }
    if options.include_table_descriptions {
        if let Some(desc) =
            present(&table.description).filter(|_| wants_table(EntityKind::TableDescription))
        {
            out.push_str(&format!("<desc>\n{desc}\n</desc>\n"));
            header = true;
        }
    }
    if header {
        out.push('\n');
    }

    out.push_str("<schema>\n");
    for col in &table.columns {
        let kinds = match filter {
            None => None,
            Some(f) => match f.columns.get(&col.name) {
                Some(kinds) => Some(kinds),
                None => continue,
            },
        };
        let wants = |kind| kinds.is_none_or(|k| k.contains(&kind));
        let mut fields = vec![format!("{}:{}", col.name, col.data_type)];
        if let Some(alias) = present(&col.alias).filter(|_| wants(EntityKind::ColumnAlias)) {
            fields.push(alias.to_string());
        }
        if let Some(d) = present(&col.description).filter(|_| wants(EntityKind::ColumnDescription)) {
            fields.push(format!("Column description: {d}"));
        }
        if let Some(v) =
            present(&col.value_description).filter(|_| wants(EntityKind::ValueDescription))
        {
            fields.push(format!("Value description: {v}"));
        }
        out.push_str(&format!("({}),\n", fields.join(", ")));
    }
    out.push_str("</schema>\n</table>");
    out
}

/// Splits the catalog into schema entities of the enabled kinds.
///
/// Output order is catalog order: per table, the table-level kinds and then
/// each column's column-level kinds, kinds in [`EntityKind::ALL`] order.
/// Fields that are absent or blank yield no entity.
pub fn decompose(catalog: &Catalog, enabled: &BTreeSet<EntityKind>) -> Vec<SchemaEntity> {
    let mut out = Vec::new();
    for db in &catalog.databases {
        for table in &db.tables {
            for kind in enabled.iter().copied().filter(|k| k.level() == Level::Table) {
                let text = match kind {
                    EntityKind::TableName => Some(format!("{}.{}", db.name, table.name)),
                    EntityKind::TableAlias => present(&table.alias).map(str::to_string),
                    EntityKind::TableDescription => present(&table.description).map(str::to_string),
                    _ => unreachable!(),
                };
                if let Some(text) = text {
                    out.push(SchemaEntity {
                        id: EntityId::for_owner(&db.name, &table.name, None, kind),
                        database: db.name.clone(),
                        table: table.name.clone(),
                        column: None,
                        kind,
                        text,
                    });
                }
            }
            for col in &table.columns {
                for kind in enabled.iter().copied().filter(|k| k.level() == Level::Column) {
                    let text = match kind {
                        EntityKind::ColumnName => Some(col.name.as_str()),
                        EntityKind::ColumnAlias => present(&col.alias),
                        EntityKind::ColumnDescription => present(&col.description),
                        EntityKind::ValueDescription => present(&col.value_description),
                        _ => unreachable!(),
                    };
                    if let Some(text) = text {
                        out.push(SchemaEntity {
                            id: EntityId::for_owner(&db.name, &table.name, Some(&col.name), kind),
                            database: db.name.clone(),
                            table: table.name.clone(),
                            column: Some(col.name.clone()),
                            kind,
                            text: text.to_string(),
                        });
                    }
                }
            }
        }
    }
    out
}
