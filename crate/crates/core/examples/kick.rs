use impulse_core::model::{DomainBox, ImpulseAtom, ImpulseControl, Shape, SystemSpec};
use impulse_core::solver::{solve_ivp, SolveOptions};
use impulse_core::Expr;

fn main() -> impulse_core::Result<()> {
    // x' = x * v, with v a unit tent-shaped impulse at t = 0
    let system = SystemSpec::from_exprs(
        vec![Expr::parse("0", 1)?],
        vec![vec![Expr::parse("x1", 1)?]],
        DomainBox::new((-1.0, 1.0), vec![(-10.0, 10.0)])?,
    )?;
    let control = ImpulseControl::atoms_only(1, vec![ImpulseAtom::shared(0.0, vec![1.0], Shape::tent())?])?;
    let traj = solve_ivp(&system, &control, -0.5, &[1.0], 0.5, &SolveOptions::default())?;
    let jump = &traj.jumps[0];
    println!("x(0-) = {:?}, x(0+) = {:?}", jump.x_minus, jump.x_plus);
    Ok(())
}
