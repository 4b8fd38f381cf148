use std::fmt;

/// Failure class of a CLI run; decides the exit code and the message prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Config,
    Data,
    Divergence,
    Internal,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Divergence => 4,
            Kind::Internal => 1,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Divergence => "divergence",
            Kind::Internal => "internal",
        }
    }
}

/// Marker attached to an `anyhow::Error` chain to fix its class.
#[derive(Debug)]
pub struct Classified(pub Kind);

impl fmt::Display for Classified {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error", self.0.tag())
    }
}

impl std::error::Error for Classified {}

pub trait Classify<T> {
    fn kind(self, kind: Kind) -> anyhow::Result<T>;
}

impl<T, E: Into<anyhow::Error>> Classify<T> for Result<T, E> {
    fn kind(self, kind: Kind) -> anyhow::Result<T> {
        self.map_err(|e| e.into().context(Classified(kind)))
    }
}

pub fn bail(kind: Kind, message: impl fmt::Display) -> anyhow::Error {
    anyhow::anyhow!("{message}").context(Classified(kind))
}

/// Explicit marker first, otherwise the library error's own category.
pub fn classify(err: &anyhow::Error) -> Kind {
    if let Some(Classified(kind)) = err.downcast_ref::<Classified>() {
        return *kind;
    }
    match err.downcast_ref::<advlab::Error>() {
        Some(advlab::Error::InvalidArgument(_)) => Kind::Config,
        Some(advlab::Error::Parse { .. } | advlab::Error::Io { .. } | advlab::Error::Checkpoint(_)) => Kind::Data,
        Some(advlab::Error::Training { .. }) => Kind::Divergence,
        None => Kind::Internal,
    }
}

/// One line, `error[<class>]: <outermost message>: <causes>`, without the marker.
pub fn render(err: &anyhow::Error) -> String {
    let marker = err.downcast_ref::<Classified>().map(|c| c.to_string());
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string().replace('\n', " ");
        // Library errors already inline their source.
        if Some(&text) == marker.as_ref() || parts.last().is_some_and(|p| p.ends_with(&text)) {
            continue;
        }
        parts.push(text);
    }
    format!("error[{}]: {}", classify(err).tag(), parts.join(": "))
}
