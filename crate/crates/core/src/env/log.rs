//! Binary trajectory log: a versioned little-endian record of one episode
//! (both agents' histories plus final hidden features), keyed by the game
//! config digest so logs cannot be replayed against the wrong rules.

use super::{EnvError, HiddenFeatures, ObservationFeatures, Result, TrajStep, Trajectory};
use std::io::{Read, Write};

const MAGIC: &[u8; 4] = b"GBTL";
const VERSION: u32 = 1;
const NO_REVEAL: u32 = u32::MAX;

#[derive(Debug, Clone)]
pub struct TrajectoryLogRecord {
    pub config_digest: [u8; 32],
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
    /// Final hidden features of each agent.
    pub hidden: Vec<HiddenFeatures>,
}

fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn get_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_trajectory_log(w: &mut impl Write, rec: &TrajectoryLogRecord) -> Result<()> {
    if rec.trajectories.is_empty() || rec.trajectories.len() != rec.hidden.len() {
        return Err(EnvError::Contract(
            "log needs matching trajectories and hidden features".into(),
        ));
    }
    let num_turns = rec.trajectories[0].num_turns();
    let num_features = rec.trajectories[0].steps[0].obs.values.len();
    for t in &rec.trajectories {
        if t.num_turns() != num_turns {
            return Err(EnvError::Contract("agent turn counts differ".into()));
        }
    }
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    w.write_all(&rec.config_digest)?;
    w.write_all(&rec.seed.to_le_bytes())?;
    put_u32(w, rec.trajectories.len() as u32)?;
    put_u32(w, num_features as u32)?;
    put_u32(w, num_turns as u32)?;
    let write_obs = |w: &mut dyn Write, obs: &ObservationFeatures| -> Result<()> {
        if obs.values.len() != num_features {
            return Err(EnvError::Contract("feature count varies within log".into()));
        }
        for &v in &obs.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    };
    for t in &rec.trajectories {
        write_obs(w, &t.steps[0].obs)?;
    }
    for turn in 1..=num_turns {
        let lead = &rec.trajectories[0].steps[turn];
        let actor = lead
            .actor
            .ok_or_else(|| EnvError::Contract("turn without actor".into()))?;
        let action = lead
            .action
            .ok_or_else(|| EnvError::Contract("turn without action".into()))?;
        put_u32(w, actor as u32)?;
        put_u32(w, action as u32)?;
        w.write_all(&rec.trajectories[0].rewards[turn - 1].to_le_bytes())?;
        for t in &rec.trajectories {
            let step = &t.steps[turn];
            put_u32(w, step.own_reveal.map(|r| r as u32).unwrap_or(NO_REVEAL))?;
            write_obs(w, &step.obs)?;
        }
    }
    w.write_all(&[rec.trajectories[0].terminal as u8])?;
    for h in &rec.hidden {
        put_u32(w, h.slots.len() as u32)?;
        for (&id, &occ) in h.slots.iter().zip(h.occupied.iter()) {
            w.write_all(&[occ as u8])?;
            put_u32(w, id as u32)?;
        }
    }
    Ok(())
}

pub fn read_trajectory_log(r: &mut impl Read) -> Result<TrajectoryLogRecord> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(EnvError::Format("bad magic".into()));
    }
    let version = get_u32(r)?;
    if version != VERSION {
        return Err(EnvError::Format(format!("unsupported version {version}")));
    }
    let mut config_digest = [0u8; 32];
    r.read_exact(&mut config_digest)?;
    let mut seed_b = [0u8; 8];
    r.read_exact(&mut seed_b)?;
    let seed = u64::from_le_bytes(seed_b);
    let num_agents = get_u32(r)? as usize;
    let num_features = get_u32(r)? as usize;
    let num_turns = get_u32(r)? as usize;
    if num_agents == 0 || num_agents > 16 {
        return Err(EnvError::Format(format!("bad agent count {num_agents}")));
    }
    let read_obs = |r: &mut dyn Read| -> Result<ObservationFeatures> {
        let mut values = vec![0u16; num_features];
        for v in values.iter_mut() {
            let mut b = [0u8; 2];
            r.read_exact(&mut b)?;
            *v = u16::from_le_bytes(b);
        }
        Ok(ObservationFeatures { values })
    };
    let mut trajectories = Vec::with_capacity(num_agents);
    for agent in 0..num_agents {
        trajectories.push(Trajectory::new(agent, read_obs(r)?));
    }
    for _ in 0..num_turns {
        let actor = get_u32(r)? as usize;
        let action = get_u32(r)? as usize;
        let mut rb = [0u8; 8];
        r.read_exact(&mut rb)?;
        let reward = f64::from_le_bytes(rb);
        for t in trajectories.iter_mut() {
            let reveal = get_u32(r)?;
            let obs = read_obs(r)?;
            t.steps.push(TrajStep {
                obs,
                actor: Some(actor),
                action: Some(action),
                own_reveal: if reveal == NO_REVEAL {
                    None
                } else {
                    Some(reveal as usize)
                },
            });
            t.rewards.push(reward);
        }
    }
    let mut term = [0u8; 1];
    r.read_exact(&mut term)?;
    for t in trajectories.iter_mut() {
        t.terminal = term[0] != 0;
    }
    let mut hidden = Vec::with_capacity(num_agents);
    for _ in 0..num_agents {
        let n = get_u32(r)? as usize;
        let mut slots = Vec::with_capacity(n);
        let mut occupied = Vec::with_capacity(n);
        for _ in 0..n {
            let mut ob = [0u8; 1];
            r.read_exact(&mut ob)?;
            occupied.push(ob[0] != 0);
            slots.push(get_u32(r)? as usize);
        }
        hidden.push(HiddenFeatures { slots, occupied });
    }
    Ok(TrajectoryLogRecord {
        config_digest,
        seed,
        trajectories,
        hidden,
    })
}

#[cfg(test)]
mod tests {
    use super::super::{Game, MiniHanabi};
    use super::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn play_random_episode(seed: u64) -> TrajectoryLogRecord {
        let game = MiniHanabi::default_mini();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
        let mut state = game.new_game(seed);
        let mut trajs: Vec<Trajectory> = (0..2)
            .map(|p| Trajectory::new(p, game.observe(&state, p)))
            .collect();
        while !game.is_terminal(&state) {
            let actor = game.current_player(&state);
            let legal = game.legal_actions(&state).unwrap();
            let action = *legal.choose(&mut rng).unwrap();
            let pre_hand = state.hands[actor].clone();
            let out = game.step(&state, action).unwrap();
            let reveal = if action < 2 * game.config.hand_size {
                Some(pre_hand[action % game.config.hand_size])
            } else {
                None
            };
            for p in 0..2 {
                trajs[p].steps.push(TrajStep {
                    obs: game.observe(&out.state, p),
                    actor: Some(actor),
                    action: Some(action),
                    own_reveal: if p == actor { reveal } else { None },
                });
                trajs[p].rewards.push(out.reward);
                trajs[p].terminal = out.terminal;
            }
            state = out.state;
        }
        let hidden = (0..2).map(|p| game.hidden_features(&state, p)).collect();
        TrajectoryLogRecord {
            config_digest: game.config.digest(),
            seed,
            trajectories: trajs,
            hidden,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for seed in 0..5u64 {
            let rec = play_random_episode(seed);
            let mut buf = Vec::new();
            write_trajectory_log(&mut buf, &rec).unwrap();
            let back = read_trajectory_log(&mut buf.as_slice()).unwrap();
            assert_eq!(back.config_digest, rec.config_digest);
            assert_eq!(back.seed, rec.seed);
            assert_eq!(back.trajectories.len(), rec.trajectories.len());
            for (a, b) in back.trajectories.iter().zip(rec.trajectories.iter()) {
                assert_eq!(a.num_turns(), b.num_turns());
                assert_eq!(a.terminal, b.terminal);
                assert_eq!(a.rewards, b.rewards);
                for (sa, sb) in a.steps.iter().zip(b.steps.iter()) {
                    assert_eq!(sa.obs, sb.obs);
                    assert_eq!(sa.actor, sb.actor);
                    assert_eq!(sa.action, sb.action);
                    assert_eq!(sa.own_reveal, sb.own_reveal);
                }
            }
            assert_eq!(back.hidden.len(), rec.hidden.len());
            for (a, b) in back.hidden.iter().zip(rec.hidden.iter()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn rejects_bad_magic() {
        let rec = play_random_episode(0);
        let mut buf = Vec::new();
        write_trajectory_log(&mut buf, &rec).unwrap();
        buf[0] = b'X';
        assert!(read_trajectory_log(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn rejects_truncation() {
        let rec = play_random_episode(1);
        let mut buf = Vec::new();
        write_trajectory_log(&mut buf, &rec).unwrap();
        buf.truncate(buf.len() / 2);
        assert!(read_trajectory_log(&mut buf.as_slice()).is_err());
    }
}
