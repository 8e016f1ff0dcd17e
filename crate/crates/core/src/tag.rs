//! Tag names, interned tag ids and hierarchical tag paths.
//!
//! A tag names one component that memory can be billed to. Tags are interned
//! into a [`TagRegistry`] which hands out dense [`TagId`]s; a [`TagPath`] is a
//! sequence of ids rooted at the implicit `root` tag. The canonical textual
//! form of a path is `/` for the root and `/seg/seg/...` otherwise.

use std::borrow::Borrow;
use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, PoisonError, RwLock};

use thiserror::Error;

/// Maximum number of segments in a [`TagPath`].
pub const MAX_DEPTH: usize = 32;

/// Maximum length of a tag name in bytes.
pub const MAX_NAME_LEN: usize = 128;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TagError {
    #[error("invalid tag name {name:?}: {reason}")]
    InvalidTagName { name: String, reason: &'static str },
    #[error("unknown tag id {0}")]
    UnknownTagId(u32),
    #[error("malformed path {path:?}: {reason}")]
    MalformedPath { path: String, reason: String },
    #[error("the root path has no parent")]
    RootHasNoParent,
}

/// A validated tag name.
///
/// Non-empty, at most 128 bytes, no `/` and no control bytes below 0x20.
/// Comparison is exact and case-sensitive.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TagName(Arc<str>);

impl TagName {
    pub fn new(name: &str) -> Result<Self, TagError> {
        validate_name(name)?;
        Ok(TagName(Arc::from(name)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for TagName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(&*self.0, f)
    }
}

impl fmt::Display for TagName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl Borrow<str> for TagName {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl AsRef<str> for TagName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

fn validate_name(name: &str) -> Result<(), TagError> {
    let reason = if name.is_empty() {
        "empty"
    } else if name.len() > MAX_NAME_LEN {
        "longer than 128 bytes"
    } else if name.contains('/') {
        "contains '/'"
    } else if name.bytes().any(|b| b < 0x20) {
        "contains a control character"
    } else {
        return Ok(());
    };
    Err(TagError::InvalidTagName {
        name: name.to_owned(),
        reason,
    })
}

/// Dense identifier of an interned tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TagId(pub u32);

impl TagId {
    pub const ROOT: TagId = TagId(0);
    pub const UNTAGGED: TagId = TagId(1);
}

impl fmt::Display for TagId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// A hierarchical attribution bucket, implicitly rooted at [`TagId::ROOT`].
///
/// The root itself is the empty path.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TagPath(Vec<TagId>);

impl TagPath {
    pub const fn root() -> Self {
        TagPath(Vec::new())
    }

    /// Builds a path from segments, rejecting ROOT segments and over-deep paths.
    pub fn new(segments: Vec<TagId>) -> Result<Self, TagError> {
        Self::check_segments(&segments)?;
        Ok(TagPath(segments))
    }

    pub(crate) fn check_segments(segments: &[TagId]) -> Result<(), TagError> {
        if segments.len() > MAX_DEPTH {
            return Err(TagError::MalformedPath {
                path: format!("{segments:?}"),
                reason: format!("depth {} exceeds {MAX_DEPTH}", segments.len()),
            });
        }
        if segments.contains(&TagId::ROOT) {
            return Err(TagError::MalformedPath {
                path: format!("{segments:?}"),
                reason: "root tag used as a segment".to_owned(),
            });
        }
        Ok(())
    }

    pub(crate) fn from_slice_unchecked(segments: &[TagId]) -> Self {
        TagPath(segments.to_vec())
    }

    pub fn single(tag: TagId) -> Self {
        if tag == TagId::ROOT {
            TagPath::root()
        } else {
            TagPath(vec![tag])
        }
    }

    pub fn segments(&self) -> &[TagId] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parent(&self) -> Result<TagPath, TagError> {
        match self.0.split_last() {
            Some((_, rest)) => Ok(TagPath(rest.to_vec())),
            None => Err(TagError::RootHasNoParent),
        }
    }

    /// Returns a new path with `tag` appended.
    pub fn child(&self, tag: TagId) -> Result<TagPath, TagError> {
        let mut segments = self.0.clone();
        segments.push(tag);
        TagPath::new(segments)
    }
}

impl Borrow<[TagId]> for TagPath {
    fn borrow(&self) -> &[TagId] {
        &self.0
    }
}

/// Returns the parent of `path`.
pub fn parent_of(path: &TagPath) -> Result<TagPath, TagError> {
    path.parent()
}

#[derive(Default)]
struct RegistryInner {
    names: Vec<TagName>,
    ids: HashMap<TagName, TagId>,
}

/// Append-only bidirectional map between tag names and ids.
///
/// Safe to share between threads; two racing interns of the same name
/// observe the same id.
pub struct TagRegistry {
    inner: RwLock<RegistryInner>,
    len: AtomicU32,
}

impl Default for TagRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for TagRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("TagRegistry")
            .field("len", &self.len())
            .finish()
    }
}

impl TagRegistry {
    pub fn new() -> Self {
        let mut inner = RegistryInner::default();
        for name in ["root", "untagged"] {
            let name = TagName::new(name).expect("reserved names are valid");
            let id = TagId(inner.names.len() as u32);
            inner.ids.insert(name.clone(), id);
            inner.names.push(name);
        }
        TagRegistry {
            len: AtomicU32::new(inner.names.len() as u32),
            inner: RwLock::new(inner),
        }
    }

    /// Interns `name`, returning the existing id if it is already known.
    pub fn intern(&self, name: &str) -> Result<TagId, TagError> {
        if let Some(id) = self.lookup(name) {
            return Ok(id);
        }
        let name = TagName::new(name)?;
        let mut inner = self.inner.write().unwrap_or_else(PoisonError::into_inner);
        if let Some(&id) = inner.ids.get(name.as_str()) {
            return Ok(id);
        }
        let id = TagId(inner.names.len() as u32);
        inner.ids.insert(name.clone(), id);
        inner.names.push(name);
        self.len.store(id.0 + 1, Ordering::Release);
        Ok(id)
    }

    /// Looks up a name without interning it.
    pub fn lookup(&self, name: &str) -> Option<TagId> {
        let inner = self.inner.read().unwrap_or_else(PoisonError::into_inner);
        inner.ids.get(name).copied()
    }

    pub fn name_of(&self, id: TagId) -> Result<TagName, TagError> {
        let inner = self.inner.read().unwrap_or_else(PoisonError::into_inner);
        inner
            .names
            .get(id.0 as usize)
            .cloned()
            .ok_or(TagError::UnknownTagId(id.0))
    }

    pub fn len(&self) -> usize {
        self.len.load(Ordering::Acquire) as usize
    }

    /// True if `id` has been handed out by this registry. Lock-free.
    pub fn contains(&self, id: TagId) -> bool {
        id.0 < self.len.load(Ordering::Acquire)
    }

    /// Always false: the reserved tags are present from construction.
    pub fn is_empty(&self) -> bool {
        false
    }

    /// Renders `path` as `/` or `/a/b/...`.
    pub fn canonical_path_string(&self, path: &TagPath) -> Result<String, TagError> {
        self.render_segments(path.segments())
    }

    pub(crate) fn render_segments(&self, segments: &[TagId]) -> Result<String, TagError> {
        if segments.is_empty() {
            return Ok("/".to_owned());
        }
        let inner = self.inner.read().unwrap_or_else(PoisonError::into_inner);
        let mut out = String::new();
        for id in segments {
            let name = inner
                .names
                .get(id.0 as usize)
                .ok_or(TagError::UnknownTagId(id.0))?;
            out.push('/');
            out.push_str(name.as_str());
        }
        Ok(out)
    }

    /// Parses a canonical path string, interning unknown segment names.
    pub fn parse_path(&self, text: &str) -> Result<TagPath, TagError> {
        let names = split_path(text)?;
        let mut segments = Vec::with_capacity(names.len());
        for name in names {
            let id = self
                .intern(name)
                .map_err(|e| malformed(text, e.to_string()))?;
            if id == TagId::ROOT {
                return Err(malformed(text, "segment names the root tag".to_owned()));
            }
            segments.push(id);
        }
        Ok(TagPath(segments))
    }
}

/// Free-function form of [`TagRegistry::intern`].
pub fn intern(registry: &TagRegistry, name: &str) -> Result<TagId, TagError> {
    registry.intern(name)
}

/// Free-function form of [`TagRegistry::name_of`].
pub fn name_of(registry: &TagRegistry, id: TagId) -> Result<TagName, TagError> {
    registry.name_of(id)
}

/// Free-function form of [`TagRegistry::canonical_path_string`].
pub fn canonical_path_string(registry: &TagRegistry, path: &TagPath) -> Result<String, TagError> {
    registry.canonical_path_string(path)
}

/// Free-function form of [`TagRegistry::parse_path`].
pub fn parse_path(text: &str, registry: &TagRegistry) -> Result<TagPath, TagError> {
    registry.parse_path(text)
}

fn malformed(path: &str, reason: String) -> TagError {
    TagError::MalformedPath {
        path: path.to_owned(),
        reason,
    }
}

/// Splits a canonical path string into segment names, checking the grammar
/// `"/" | "/" segment ("/" segment)*` with no registry involved.
pub fn split_path(text: &str) -> Result<Vec<&str>, TagError> {
    let Some(rest) = text.strip_prefix('/') else {
        return Err(malformed(text, "missing leading '/'".to_owned()));
    };
    if rest.is_empty() {
        return Ok(Vec::new());
    }
    let names: Vec<&str> = rest.split('/').collect();
    if names.len() > MAX_DEPTH {
        return Err(malformed(
            text,
            format!("depth {} exceeds {MAX_DEPTH}", names.len()),
        ));
    }
    for name in &names {
        if name.is_empty() {
            return Err(malformed(text, "empty segment".to_owned()));
        }
        validate_name(name).map_err(|e| malformed(text, e.to_string()))?;
    }
    Ok(names)
}

/// Checks that `text` is a well-formed canonical path string.
pub fn validate_path_str(text: &str) -> Result<(), TagError> {
    split_path(text).map(|_| ())
}

/// Depth of a canonical path string (`/` is 0). Assumes a valid path.
pub fn path_str_depth(text: &str) -> usize {
    if text == "/" {
        0
    } else {
        text.matches('/').count()
    }
}

/// True if `path` equals `ancestor` or lies underneath it.
/// Both arguments are canonical path strings.
pub fn path_str_within(path: &str, ancestor: &str) -> bool {
    if ancestor == "/" {
        return true;
    }
    match path.strip_prefix(ancestor) {
        Some("") => true,
        Some(rest) => rest.starts_with('/'),
        None => false,
    }
}
