//! Grid specifications: `1024`, `256,512,1024`, `1024:16384:x2` (geometric)
//! or `0:64:+16` (arithmetic). Ends are inclusive when reached.

pub fn parse_grid(text: &str) -> Result<Vec<usize>, String> {
    let text = text.trim();
    let num = |s: &str| s.trim().parse::<usize>().map_err(|_| format!("bad grid value {s:?} in {text:?}"));
    let out = if let Some((start, rest)) = text.split_once(':') {
        let (end, step) = rest.split_once(':').ok_or_else(|| format!("grid {text:?} needs start:end:step"))?;
        let (start, end) = (num(start)?, num(end)?);
        if end < start {
            return Err(format!("grid {text:?} ends before it starts"));
        }
        let mut v = Vec::new();
        if let Some(f) = step.strip_prefix('x') {
            let f = num(f)?;
            if f < 2 || start == 0 {
                return Err(format!("geometric grid {text:?} needs a factor ≥ 2 and a positive start"));
            }
            let mut x = start;
            while x <= end {
                v.push(x);
                x = x.checked_mul(f).ok_or_else(|| format!("grid {text:?} overflows"))?;
            }
        } else if let Some(s) = step.strip_prefix('+') {
            let s = num(s)?;
            if s == 0 {
                return Err(format!("arithmetic grid {text:?} needs a positive step"));
            }
            v.extend((start..=end).step_by(s));
        } else {
            return Err(format!("grid step {step:?} must be xF or +S"));
        }
        v
    } else {
        text.split(',').map(num).collect::<Result<Vec<_>, _>>()?
    };
    if out.is_empty() {
        return Err(format!("grid {text:?} is empty"));
    }
    Ok(out)
}
